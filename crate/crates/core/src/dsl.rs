//! Dense SimSiam learning: per-stage projector/predictor heads, the
//! negative-cosine similarity with stop-gradient, and the weighted
//! multi-stage objective.

use std::fmt;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::STAGES;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Linear, Mode, NormConfig, ParamStore};
use crate::scalar::Scalar;
use crate::seeding;

/// Guard added under the square root of every norm on the tape.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Context,
    Target,
    Fusion,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Context, Stream::Target, Stream::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Context => "context",
            Stream::Target => "target",
            Stream::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageWeights(pub [f64; STAGES]);

impl Default for StageWeights {
    fn default() -> Self {
        StageWeights([0.1, 0.4, 0.7, 1.0])
    }
}

impl StageWeights {
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// `D(p, z) = -(p / |p|) . (z / |z|)`.
///
/// Fails on a zero-norm operand. The tape version
/// ([`Graph::neg_cosine_rows`]) instead guards norms with [`NORM_EPS`].
pub fn neg_cosine<F: Float>(p: &[F], z: &[F]) -> Result<F> {
    if p.len() != z.len() {
        return Err(Error::Precondition(format!(
            "neg_cosine: dimensions {} and {}",
            p.len(),
            z.len()
        )));
    }
    let dot = p.iter().zip(z).fold(F::zero(), |a, (&x, &y)| a + x * y);
    let np = p.iter().fold(F::zero(), |a, &x| a + x * x).sqrt();
    let nz = z.iter().fold(F::zero(), |a, &x| a + x * x).sqrt();
    if np == F::zero() || nz == F::zero() {
        return Err(Error::Domain("neg_cosine of a zero-norm vector".into()));
    }
    Ok(-(dot / (np * nz)))
}

/// Symmetric loss `½ D(p1, sg(z2)) + ½ D(p2, sg(z1))`.
pub fn stage_loss<F: Float>(p1: &[F], z2: &[F], p2: &[F], z1: &[F]) -> Result<F> {
    let half = F::from(0.5).expect("0.5 representable");
    Ok(half * neg_cosine(p1, z2)? + half * neg_cosine(p2, z1)?)
}

/// `sum_i w_i * L_i` over the stages.
pub fn dsl_branch_loss<F: Float>(stage_losses: &[F], weights: &[F]) -> Result<F> {
    if stage_losses.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} stage losses for {} weights",
            stage_losses.len(),
            weights.len()
        )));
    }
    Ok(stage_losses
        .iter()
        .zip(weights)
        .fold(F::zero(), |a, (&l, &w)| a + w * l))
}

/// `L = L_c + L_t + L_fu`; the fusion term is absent when fusion is disabled.
pub fn total_loss<F: Float>(context: F, target: F, fusion: Option<F>) -> F {
    context + target + fusion.unwrap_or_else(F::zero)
}

/// Symmetric stop-gradient loss on the tape for `[n, d]` batches (mean over rows).
pub fn stage_loss_graph<T: Scalar>(g: &mut Graph<T>, p1: Var, z2: Var, p2: Var, z1: Var) -> Var {
    let z2 = g.detach(z2);
    let z1 = g.detach(z1);
    let eps = T::c(NORM_EPS);
    let a = g.neg_cosine_rows(p1, z2, eps);
    let b = g.neg_cosine_rows(p2, z1, eps);
    let half = T::c(0.5);
    g.weighted_sum(&[a, b], &[half, half])
}

/// Three linear layers of width `dim`, batch-norm between them and after the
/// last one; ReLU only between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub dim: usize,
    layers: [(Linear, BatchNorm); 3],
}

impl Projector {
    pub fn new(prefix: &str, dim: usize) -> Self {
        let layer = |i: usize| {
            (
                Linear::new(format!("{prefix}.proj.fc{i}"), dim, dim, false),
                BatchNorm::new(format!("{prefix}.proj.bn{i}"), dim),
            )
        };
        let (l3, bn3) = layer(3);
        Projector {
            dim,
            layers: [layer(1), layer(2), (l3, bn3.without_affine())],
        }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for (l, bn) in &self.layers {
            l.init(store, rng);
            bn.init(store);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode, norm: NormConfig) -> Var {
        let mut h = x;
        for (i, (l, bn)) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h);
            h = bn.forward(g, store, h, mode, norm);
            if i < 2 {
                h = g.relu(h);
            }
        }
        h
    }
}

/// Bottleneck MLP `dim -> dim/4 -> dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub dim: usize,
    pub hidden: usize,
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
}

impl Predictor {
    pub fn new(prefix: &str, dim: usize) -> Self {
        let hidden = (dim / 4).max(1);
        Predictor {
            dim,
            hidden,
            fc1: Linear::new(format!("{prefix}.pred.fc1"), dim, hidden, false),
            bn1: BatchNorm::new(format!("{prefix}.pred.bn1"), hidden),
            fc2: Linear::new(format!("{prefix}.pred.fc2"), hidden, dim, true),
        }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng);
        self.bn1.init(store);
        self.fc2.init(store, rng);
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode, norm: NormConfig) -> Var {
        let h = self.fc1.forward(g, store, x);
        let h = self.bn1.forward(g, store, h, mode, norm);
        let h = g.relu(h);
        self.fc2.forward(g, store, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    /// Zero-based stage index.
    pub stage: usize,
    pub stream: Stream,
    pub projector: Projector,
    pub predictor: Predictor,
}

impl Head {
    pub fn input_dim(&self) -> usize {
        self.projector.dim
    }
}

/// Which heads a bank carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub stage_widths: [usize; STAGES],
    /// Target slots per group feeding the fusion stream.
    pub m: usize,
    pub fusion: bool,
    /// `false` keeps only last-stage heads.
    pub dense: bool,
}

impl HeadLayout {
    pub fn stages(&self) -> Vec<usize> {
        if self.dense {
            (0..STAGES).collect()
        } else {
            vec![STAGES - 1]
        }
    }

    pub fn streams(&self) -> Vec<Stream> {
        if self.fusion {
            Stream::ALL.to_vec()
        } else {
            vec![Stream::Context, Stream::Target]
        }
    }

    pub fn input_dim(&self, stage: usize, stream: Stream) -> usize {
        match stream {
            Stream::Fusion => (self.m + 1) * self.stage_widths[stage],
            _ => self.stage_widths[stage],
        }
    }
}

/// Projectors and predictors for every (stage, stream) pair of a layout.
#[derive(Clone, Debug)]
pub struct DslHeadBank<T> {
    pub layout: HeadLayout,
    pub heads: Vec<Head>,
    pub store: ParamStore<T>,
    pub norm: NormConfig,
    /// Debug mode: project and predict are the identity.
    pub bypass: bool,
}

impl<T: Scalar> DslHeadBank<T> {
    pub fn init(layout: HeadLayout, norm: NormConfig, seed: u64) -> Self {
        let mut store = ParamStore::new("heads");
        let mut rng = seeding::rng(seed, &["heads".into()]);
        let mut heads = Vec::new();
        for stage in layout.stages() {
            for stream in layout.streams() {
                let dim = layout.input_dim(stage, stream);
                let prefix = format!("s{}.{}", stage + 1, stream.name());
                let head = Head {
                    stage,
                    stream,
                    projector: Projector::new(&prefix, dim),
                    predictor: Predictor::new(&prefix, dim),
                };
                head.projector.init(&mut store, &mut rng);
                head.predictor.init(&mut store, &mut rng);
                heads.push(head);
            }
        }
        DslHeadBank {
            layout,
            heads,
            store,
            norm,
            bypass: false,
        }
    }

    pub fn projector_count(&self) -> usize {
        self.heads.len()
    }

    pub fn predictor_count(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, stage: usize, stream: Stream) -> Option<&Head> {
        self.heads.iter().find(|h| h.stage == stage && h.stream == stream)
    }

    fn checked_head(&self, g: &Graph<T>, x: Var, stage: usize, stream: Stream) -> Result<Head> {
        let head = self.head(stage, stream).ok_or_else(|| {
            Error::Precondition(format!("no head for stage {} / {stream}", stage + 1))
        })?;
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != head.input_dim() {
            return Err(Error::Precondition(format!(
                "head s{}.{stream} expects [n, {}], got {:?}",
                stage + 1,
                head.input_dim(),
                shape
            )));
        }
        Ok(head.clone())
    }

    /// `z = g(x)` for the (stage, stream) head.
    pub fn project(&mut self, g: &mut Graph<T>, x: Var, stage: usize, stream: Stream, mode: Mode) -> Result<Var> {
        let head = self.checked_head(g, x, stage, stream)?;
        if self.bypass {
            return Ok(x);
        }
        Ok(head.projector.forward(g, &mut self.store, x, mode, self.norm))
    }

    /// `p = h(z)` for the (stage, stream) head.
    pub fn predict(&mut self, g: &mut Graph<T>, z: Var, stage: usize, stream: Stream, mode: Mode) -> Result<Var> {
        let head = self.checked_head(g, z, stage, stream)?;
        if self.bypass {
            return Ok(z);
        }
        Ok(head.predictor.forward(g, &mut self.store, z, mode, self.norm))
    }

    /// Qualified parameter names belonging to one head.
    pub fn head_param_names(&self, stage: usize, stream: Stream) -> Vec<String> {
        let prefix = format!("s{}.{}.", stage + 1, stream.name());
        self.store
            .params()
            .filter(|(k, _)| k.starts_with(&prefix))
            .map(|(k, _)| self.store.full_name(k))
            .collect()
    }
}
