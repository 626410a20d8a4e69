use super::{BackwardArgs, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running statistics of one batch-normalisation layer.
#[derive(Debug)]
pub struct BnBuffers<'a, T> {
    pub mean: &'a mut Tensor<T>,
    pub var: &'a mut Tensor<T>,
}

impl<T: Scalar> Graph<T> {
    /// Batch normalisation over axis 1 of `[n, c]` or `[n, c, h, w]`.
    ///
    /// In training mode batch statistics are used and the running buffers
    /// are updated with `momentum` (unbiased variance, as in the usual
    /// convention); otherwise the running buffers normalise the input.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        buffers: BnBuffers<'_, T>,
        training: bool,
        momentum: T,
        eps: T,
    ) -> Var {
        let shape = self.value(x).shape().to_vec();
        assert!(shape.len() == 2 || shape.len() == 4, "batch_norm: rank {}", shape.len());
        let (n, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        let m = n * hw;
        let xv = self.value(x).data();
        let (mean, var) = if training {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_m = T::one() / T::c(m as f64);
            for b in 0..n {
                for ch in 0..c {
                    let plane = &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    mean[ch] += plane.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|v| *v *= inv_m);
            for b in 0..n {
                for ch in 0..c {
                    let mu = mean[ch];
                    let plane = &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    var[ch] += plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_m);
            let unbias = if m > 1 {
                T::c(m as f64 / (m as f64 - 1.0))
            } else {
                T::one()
            };
            let keep = T::one() - momentum;
            for ch in 0..c {
                let rm = &mut buffers.mean.data_mut()[ch];
                *rm = keep * *rm + momentum * mean[ch];
                let rv = &mut buffers.var.data_mut()[ch];
                *rv = keep * *rv + momentum * var[ch] * unbias;
            }
            (mean, var)
        } else {
            (buffers.mean.data().to_vec(), buffers.var.data().to_vec())
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let (gm, bt) = (
                    gv.as_ref().map_or(T::one(), |g| g[ch]),
                    bv.as_ref().map_or(T::zero(), |b| b[ch]),
                );
                let off = (b * c + ch) * hw;
                for k in off..off + hw {
                    let xh = (xv[k] - mean[ch]) * invstd[ch];
                    xhat[k] = xh;
                    out[k] = gm * xh + bt;
                }
            }
        }
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        let has_gamma = gamma.is_some();
        let has_beta = beta.is_some();
        self.push_op(
            Tensor::new(shape.clone(), out).expect("same shape as input"),
            &parents,
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let g = args.grad.data();
                let gm: Vec<T> = if has_gamma {
                    args.inputs[1].data().to_vec()
                } else {
                    vec![T::one(); c]
                };
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for k in off..off + hw {
                            dgamma[ch] += g[k] * xhat[k];
                            dbeta[ch] += g[k];
                        }
                    }
                }
                let mut dx = vec![T::zero(); g.len()];
                let mm = T::c(m as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        let scale = gm[ch] * invstd[ch];
                        for k in off..off + hw {
                            dx[k] = if training {
                                scale * (g[k] - dbeta[ch] / mm - xhat[k] * dgamma[ch] / mm)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
                let mut res = vec![Some(Tensor::new(shape.clone(), dx).expect("input shape"))];
                if has_gamma {
                    res.push(Some(Tensor::new(vec![c], dgamma).expect("[c]")));
                }
                if has_beta {
                    res.push(Some(Tensor::new(vec![c], dbeta).expect("[c]")));
                }
                res
            }),
        )
    }
}
