use super::{BackwardArgs, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn t<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let mut out = va.clone();
        out.add_assign(vb);
        self.push_op(
            out,
            &[a, b],
            Box::new(|args: &BackwardArgs<'_, T>| {
                vec![Some(args.grad.clone()), Some(args.grad.clone())]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(
            out,
            &[x],
            Box::new(|args: &BackwardArgs<'_, T>| {
                let data = args
                    .output
                    .data()
                    .iter()
                    .zip(args.grad.data())
                    .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(t(args.grad.shape(), data))]
            }),
        )
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push_op(
            out,
            &[x],
            Box::new(move |args: &BackwardArgs<'_, T>| vec![Some(args.grad.map(|g| g * s))]),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push_op(
            out,
            &[x],
            Box::new(|args: &BackwardArgs<'_, T>| {
                let g = args.grad.item();
                vec![Some(Tensor::full(args.inputs[0].shape(), g))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::c(self.value(x).len() as f64);
        let s = self.sum_all(x);
        self.mul_scalar(s, T::one() / n)
    }

    /// `sum_k weights[k] * terms[k]` over scalar variables.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[T]) -> Var {
        assert_eq!(terms.len(), weights.len(), "weighted_sum: length mismatch");
        let mut acc = T::zero();
        for (&v, &w) in terms.iter().zip(weights) {
            acc += w * self.value(v).item();
        }
        let weights = weights.to_vec();
        self.push_op(
            Tensor::scalar(acc),
            terms,
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let g = args.grad.item();
                weights.iter().map(|&w| Some(Tensor::scalar(g * w))).collect()
            }),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        self.push_op(
            out,
            &[x],
            Box::new(|args: &BackwardArgs<'_, T>| {
                vec![Some(
                    args.grad
                        .clone()
                        .reshape(args.inputs[0].shape())
                        .expect("same element count"),
                )]
            }),
        )
    }

    /// `x @ w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = self.value(x).dims2();
        let (dout, win) = self.value(w).dims2();
        assert_eq!(din, win, "linear: input width {din} vs weight width {win}");
        let mut out = vec![T::zero(); n * dout];
        T::gemm(
            n,
            din,
            dout,
            T::one(),
            self.value(x).data(),
            din as isize,
            1,
            self.value(w).data(),
            1,
            din as isize,
            T::zero(),
            &mut out,
            dout as isize,
            1,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), dout);
            for row in out.chunks_mut(dout) {
                for (o, &bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(
            t(&[n, dout], out),
            &parents,
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let (xv, wv, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
                let mut dx = vec![T::zero(); n * din];
                T::gemm(n, dout, din, T::one(), g, dout as isize, 1, wv, din as isize, 1, T::zero(), &mut dx, din as isize, 1);
                let mut dw = vec![T::zero(); dout * din];
                T::gemm(dout, n, din, T::one(), g, 1, dout as isize, xv, din as isize, 1, T::zero(), &mut dw, din as isize, 1);
                let mut res = vec![Some(t(&[n, din], dx)), Some(t(&[dout, din], dw))];
                if args.inputs.len() == 3 {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    res.push(Some(t(&[dout], db)));
                }
                res
            }),
        )
    }

    /// Concatenation along axis 1 (channels for `[n, c, h, w]`, features for `[n, d]`).
    pub fn concat_dim1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.value(parts[0]).shape().to_vec();
        let n = first[0];
        let tail = &first[2..];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            assert!(
                s.len() == first.len() && s[0] == n && &s[2..] == tail,
                "concat_dim1: incompatible shapes {:?} and {:?}",
                first,
                s
            );
            widths.push(s[1..].iter().product::<usize>());
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * row);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[1] = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
        self.push_op(
            t(&shape, out),
            parts,
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let g = args.grad.data();
                let mut offset = 0;
                let mut res = Vec::with_capacity(widths.len());
                for (k, &w) in widths.iter().enumerate() {
                    let mut d = Vec::with_capacity(n * w);
                    for i in 0..n {
                        let start = i * row + offset;
                        d.extend_from_slice(&g[start..start + w]);
                    }
                    res.push(Some(t(args.inputs[k].shape(), d)));
                    offset += w;
                }
                res
            }),
        )
    }

    /// Selects rows of a `[r, d]` matrix; `None` yields an all-zero row.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Var {
        let (r, d) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); index.len() * d];
        for (k, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                assert!(i < r, "gather_rows: row {i} out of {r}");
                out[k * d..(k + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
        }
        let index = index.to_vec();
        self.push_op(
            t(&[index.len(), d], out),
            &[x],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let g = args.grad.data();
                let mut dx = vec![T::zero(); r * d];
                for (k, ix) in index.iter().enumerate() {
                    if let Some(i) = *ix {
                        for j in 0..d {
                            dx[i * d + j] += g[k * d + j];
                        }
                    }
                }
                vec![Some(t(&[r, d], dx))]
            }),
        )
    }

    /// Mean over rows of `-(p/|p|) . (z/|z|)` for `p, z: [n, d]`.
    ///
    /// Norms are computed as `sqrt(sum x^2 + eps)`. Gradient flows into both
    /// operands; wrap `z` in [`Graph::detach`] for stop-gradient semantics.
    pub fn neg_cosine_rows(&mut self, p: Var, z: Var, eps: T) -> Var {
        let (n, d) = self.value(p).dims2();
        assert_eq!(self.value(z).dims2(), (n, d), "neg_cosine_rows: shape mismatch");
        let stats = row_cosine_stats(self.value(p).data(), self.value(z).data(), n, d, eps);
        let nn = T::c(n as f64);
        let loss: T = stats.iter().map(|s| -s.dot / (s.np * s.nz)).sum::<T>() / nn;
        self.push_op(
            Tensor::scalar(loss),
            &[p, z],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let g = args.grad.item() / nn;
                let (pv, zv) = (args.inputs[0].data(), args.inputs[1].data());
                let mut dp = vec![T::zero(); n * d];
                let mut dz = vec![T::zero(); n * d];
                for (i, s) in stats.iter().enumerate() {
                    let denom = s.np * s.nz;
                    let cp = s.dot / (s.np * s.np * denom);
                    let cz = s.dot / (s.nz * s.nz * denom);
                    for j in 0..d {
                        let (pj, zj) = (pv[i * d + j], zv[i * d + j]);
                        dp[i * d + j] = g * (-zj / denom + cp * pj);
                        dz[i * d + j] = g * (-pj / denom + cz * zj);
                    }
                }
                vec![Some(t(&[n, d], dp)), Some(t(&[n, d], dz))]
            }),
        )
    }

    /// Pixel-wise softmax cross-entropy for `logits: [n, c, h, w]`.
    ///
    /// Averages over labelled pixels; pixels equal to `ignore_index` are
    /// skipped. A batch with no labelled pixel yields a zero loss.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32], ignore_index: Option<u32>) -> Var {
        let (n, c, h, w) = self.value(logits).dims4();
        let hw = h * w;
        assert_eq!(labels.len(), n * hw, "cross_entropy: label count mismatch");
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c * hw];
        let mut total = T::zero();
        let mut count = 0usize;
        for b in 0..n {
            let base = b * c * hw;
            for px in 0..hw {
                let mut mx = T::neg_infinity();
                for k in 0..c {
                    mx = mx.max(x[base + k * hw + px]);
                }
                let mut se = T::zero();
                for k in 0..c {
                    let e = (x[base + k * hw + px] - mx).exp();
                    probs[base + k * hw + px] = e;
                    se += e;
                }
                for k in 0..c {
                    probs[base + k * hw + px] /= se;
                }
                let lab = labels[b * hw + px];
                if Some(lab) == ignore_index {
                    continue;
                }
                let lab = lab as usize;
                assert!(lab < c, "cross_entropy: label {lab} >= classes {c}");
                total += -(x[base + lab * hw + px] - mx - se.ln());
                count += 1;
            }
        }
        let denom = T::c(count.max(1) as f64);
        let labels = labels.to_vec();
        self.push_op(
            Tensor::scalar(total / denom),
            &[logits],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let g = args.grad.item() / denom;
                let mut dx = vec![T::zero(); n * c * hw];
                for b in 0..n {
                    let base = b * c * hw;
                    for px in 0..hw {
                        let lab = labels[b * hw + px];
                        if Some(lab) == ignore_index {
                            continue;
                        }
                        for k in 0..c {
                            let mut v = probs[base + k * hw + px];
                            if k == lab as usize {
                                v -= T::one();
                            }
                            dx[base + k * hw + px] = g * v;
                        }
                    }
                }
                vec![Some(t(&[n, c, h, w], dx))]
            }),
        )
    }
}

struct RowStats<T> {
    dot: T,
    np: T,
    nz: T,
}

fn row_cosine_stats<T: Scalar>(p: &[T], z: &[T], n: usize, d: usize, eps: T) -> Vec<RowStats<T>> {
    (0..n)
        .map(|i| {
            let (pr, zr) = (&p[i * d..(i + 1) * d], &z[i * d..(i + 1) * d]);
            let mut dot = T::zero();
            let mut pp = T::zero();
            let mut zz = T::zero();
            for j in 0..d {
                dot += pr[j] * zr[j];
                pp += pr[j] * pr[j];
                zz += zr[j] * zr[j];
            }
            RowStats {
                dot,
                np: (pp + eps).sqrt(),
                nz: (zz + eps).sqrt(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn linear_grad() {
        check(
            &[rnd(&[3, 4], 1), rnd(&[2, 4], 2), rnd(&[2], 3)],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]));
                let r = g.relu(y);
                g.sum_all(r)
            },
            1e-6,
        );
    }

    #[test]
    fn neg_cosine_grad() {
        check(
            &[rnd(&[3, 5], 4), rnd(&[3, 5], 5)],
            |g, v| g.neg_cosine_rows(v[0], v[1], 1e-12),
            1e-6,
        );
    }

    #[test]
    fn concat_gather_reshape_grad() {
        check(
            &[rnd(&[2, 3], 6), rnd(&[4, 3], 7)],
            |g, v| {
                let picked = g.gather_rows(v[1], &[Some(2), None, Some(0), Some(3), Some(1), None]);
                let picked = g.reshape(picked, &[2, 9]);
                let cat = g.concat_dim1(&[v[0], picked]);
                let w = g.constant(rnd(&[2, 12], 8));
                let s = g.add(cat, w);
                let s = g.relu(s);
                g.sum_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 5, 2, 2]));
        let l = g.cross_entropy(x, &[0, 1, 2, 4], None);
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_with_ignore() {
        check(
            &[rnd(&[2, 3, 2, 2], 9)],
            |g, v| g.cross_entropy(v[0], &[0, 1, 2, 255, 1, 1, 0, 2], Some(255)),
            1e-6,
        );
    }

    #[test]
    fn weighted_sum_value_and_grad() {
        check(
            &[rnd(&[1], 10), rnd(&[1], 11)],
            |g, v| {
                let a = g.sum_all(v[0]);
                let b = g.sum_all(v[1]);
                g.weighted_sum(&[a, b], &[0.4, 0.7])
            },
            1e-8,
        );
    }
}
