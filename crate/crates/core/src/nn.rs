//! Parameter storage and the handful of layers the encoders, decoders and
//! heads are assembled from.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{BnBuffers, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn training(self) -> bool {
        self == Mode::Train
    }
}

/// Named parameters and buffers of one model component.
///
/// Names are local (`layer1.0.conv1.weight`); the store's namespace is
/// prepended when a parameter enters a [`Graph`], so gradients of several
/// stores can live side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    namespace: String,
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(namespace: impl Into<String>) -> Self {
        ParamStore {
            namespace: namespace.into(),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn namespace(&self) -> &str {
        &self.namespace
    }

    pub fn full_name(&self, local: &str) -> String {
        format!("{}/{}", self.namespace, local)
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{}`", self.full_name(name)))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> &Tensor<T> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer `{}`", self.full_name(name)))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Puts the parameter into `g` under its qualified name.
    pub fn var(&self, g: &mut Graph<T>, name: &str) -> Var {
        g.param(&self.full_name(name), self.param(name))
    }

    fn bn_buffers(&mut self, name: &str) -> BnBuffers<'_, T> {
        let mean_key = format!("{name}.running_mean");
        let var_key = format!("{name}.running_var");
        assert!(self.buffers.contains_key(&mean_key) && self.buffers.contains_key(&var_key));
        // Two distinct keys; split the borrow through an iterator.
        let mut mean = None;
        let mut var = None;
        for (k, v) in self.buffers.iter_mut() {
            if *k == mean_key {
                mean = Some(v);
            } else if *k == var_key {
                var = Some(v);
            }
        }
        BnBuffers {
            mean: mean.expect("running_mean"),
            var: var.expect("running_var"),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (kind, map) in [("p", &self.params), ("b", &self.buffers)] {
            for (name, t) in map {
                h.update(kind.as_bytes());
                h.update(name.as_bytes());
                for d in t.shape() {
                    h.update((*d as u64).to_le_bytes());
                }
                buf.clear();
                for &v in t.data() {
                    v.write_le(&mut buf);
                }
                h.update(&buf);
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every parameter and buffer of `src` into `self`, requiring the
    /// same names and shapes.
    pub fn copy_from(&mut self, src: &ParamStore<T>) -> Result<()> {
        for (kind, dst, from) in [
            ("parameter", &mut self.params, &src.params),
            ("buffer", &mut self.buffers, &src.buffers),
        ] {
            for (name, t) in dst.iter_mut() {
                let s = from.get(name).ok_or_else(|| {
                    Error::Validation(format!("source store lacks {kind} `{name}`"))
                })?;
                if s.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: t.shape().to_vec(),
                        found: s.shape().to_vec(),
                    });
                }
                *t = s.clone();
            }
        }
        Ok(())
    }

    pub fn same_topology(&self, other: &ParamStore<T>) -> bool {
        let shapes = |m: &BTreeMap<String, Tensor<T>>| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        shapes(&self.params) == shapes(&other.params)
            && shapes(&self.buffers) == shapes(&other.buffers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride,
            pad,
            bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    /// Kaiming-normal weights (fan-out, ReLU gain), zero bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let fan_out = self.cout * self.kernel * self.kernel;
        let std = (2.0 / fan_out as f64).sqrt();
        store.insert_param(
            format!("{}.weight", self.name),
            Tensor::randn(&[self.cout, self.cin, self.kernel, self.kernel], std, rng),
        );
        if self.bias {
            store.insert_param(format!("{}.bias", self.name), Tensor::zeros(&[self.cout]));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = store.var(g, &format!("{}.weight", self.name));
        let b = self.bias.then(|| store.var(g, &format!("{}.bias", self.name)));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub affine: bool,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm {
            name: name.into(),
            channels,
            affine: true,
        }
    }

    pub fn without_affine(mut self) -> Self {
        self.affine = false;
        self
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        if self.affine {
            store.insert_param(format!("{}.weight", self.name), Tensor::ones(&[self.channels]));
            store.insert_param(format!("{}.bias", self.name), Tensor::zeros(&[self.channels]));
        }
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&[self.channels]));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::ones(&[self.channels]));
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        cfg: NormConfig,
    ) -> Var {
        let (gamma, beta) = if self.affine {
            (
                Some(store.var(g, &format!("{}.weight", self.name))),
                Some(store.var(g, &format!("{}.bias", self.name))),
            )
        } else {
            (None, None)
        };
        let buffers = store.bn_buffers(&self.name);
        g.batch_norm(x, gamma, beta, buffers, mode.training(), T::c(cfg.momentum), T::c(cfg.eps))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            name: name.into(),
            din,
            dout,
            bias,
        }
    }

    /// Uniform `±1/sqrt(din)` initialisation for weights and bias.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        let bound = 1.0 / (self.din as f64).sqrt();
        store.insert_param(
            format!("{}.weight", self.name),
            Tensor::uniform(&[self.dout, self.din], bound, rng),
        );
        if self.bias {
            store.insert_param(format!("{}.bias", self.name), Tensor::uniform(&[self.dout], bound, rng));
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = store.var(g, &format!("{}.weight", self.name));
        let b = self.bias.then(|| store.var(g, &format!("{}.bias", self.name)));
        g.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new("m");
        Conv2d::new("c", 2, 3, 3, 1, 1).init(&mut s, &mut rng);
        BatchNorm::new("bn", 3).init(&mut s);
        let before = s.checksum();
        assert_eq!(before, s.clone().checksum());
        s.param_mut("bn.bias").unwrap().data_mut()[0] = 0.5;
        assert_ne!(before, s.checksum());
    }

    #[test]
    fn copy_from_rejects_shape_change() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut a = ParamStore::<f32>::new("a");
        let mut b = ParamStore::<f32>::new("b");
        Linear::new("l", 4, 2, true).init(&mut a, &mut rng);
        Linear::new("l", 4, 3, true).init(&mut b, &mut rng);
        assert!(matches!(a.copy_from(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut s = ParamStore::<f64>::new("m");
        let bn = BatchNorm::new("bn", 1);
        bn.init(&mut s);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_f64(&[2, 1], &[3.0, -1.0]).unwrap());
        let y = bn.forward(&mut g, &mut s, x, Mode::Eval, NormConfig { momentum: 0.1, eps: 0.0 });
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);
    }
}
