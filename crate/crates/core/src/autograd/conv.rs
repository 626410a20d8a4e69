//! Spatial operators on `[n, c, h, w]` tensors.

use super::{BackwardArgs, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[c, h, w]` image into `[c*kh*kw, oh*ow]` columns.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let l = oh * ow;
    for ci in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn tensor<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape.to_vec(), data).expect("shape/data agree by construction")
}

impl<T: Scalar> Graph<T> {
    /// 2-D convolution; `w: [co, ci, kh, kw]`, optional `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (co, ci, kh, kw) = self.value(w).dims4();
        assert_eq!(c, ci, "conv2d: input has {c} channels, kernel expects {ci}");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
        );
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let (k, l) = (c * kh * kw, oh * ow);
        let mut out = vec![T::zero(); n * co * l];
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for i in 0..n {
                let img = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let colv: &[T] = if geom.is_pointwise() {
                    img
                } else {
                    im2col(img, &geom, &mut cols);
                    &cols
                };
                T::gemm(co, k, l, T::one(), wv, k as isize, 1, colv, l as isize, 1, T::zero(), &mut out[i * co * l..(i + 1) * co * l], l as isize, 1);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for i in 0..n {
                    for (o, &bb) in bv.iter().enumerate() {
                        let start = (i * co + o) * l;
                        out[start..start + l].iter_mut().for_each(|v| *v += bb);
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(
            tensor(&[n, co, oh, ow], out),
            &parents,
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let xv = args.inputs[0].data();
                let wv = args.inputs[1].data();
                let g = args.grad.data();
                let mut dx = vec![T::zero(); n * c * h * wd];
                let mut dw = vec![T::zero(); co * k];
                let mut cols = vec![T::zero(); k * l];
                let mut dcols = vec![T::zero(); k * l];
                for i in 0..n {
                    let img = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                    let gi = &g[i * co * l..(i + 1) * co * l];
                    if geom.is_pointwise() {
                        cols.copy_from_slice(img);
                    } else {
                        im2col(img, &geom, &mut cols);
                    }
                    // dw += g_i [co, l] x cols^T [l, k]
                    T::gemm(co, l, k, T::one(), gi, l as isize, 1, &cols, 1, l as isize, T::one(), &mut dw, k as isize, 1);
                    // dcols = w^T [k, co] x g_i [co, l]
                    T::gemm(k, co, l, T::one(), wv, 1, k as isize, gi, l as isize, 1, T::zero(), &mut dcols, l as isize, 1);
                    let dxi = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
                    if geom.is_pointwise() {
                        dxi.copy_from_slice(&dcols);
                    } else {
                        col2im(&dcols, &geom, dxi);
                    }
                }
                let mut res = vec![
                    Some(tensor(&[n, c, h, wd], dx)),
                    Some(tensor(&[co, c, kh, kw], dw)),
                ];
                if args.inputs.len() == 3 {
                    let mut db = vec![T::zero(); co];
                    for i in 0..n {
                        for (o, d) in db.iter_mut().enumerate() {
                            let start = (i * co + o) * l;
                            *d += g[start..start + l].iter().copied().sum::<T>();
                        }
                    }
                    res.push(Some(tensor(&[co], db)));
                }
                res
            }),
        )
    }

    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let geom = ConvGeom {
            c,
            h,
            w,
            kh: k,
            kw: k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_ix = usize::MAX;
                    for ki in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if best_ix == usize::MAX || src[idx] > best {
                                best = src[idx];
                                best_ix = idx;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    out[o] = best;
                    arg[o] = plane * h * w + best_ix;
                }
            }
        }
        self.push_op(
            tensor(&[n, c, oh, ow], out),
            &[x],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut dx = vec![T::zero(); n * c * h * w];
                for (&a, &g) in arg.iter().zip(args.grad.data()) {
                    dx[a] += g;
                }
                vec![Some(tensor(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Mean over the spatial axes: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let inv = T::one() / T::c(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        self.push_op(
            tensor(&[n, c], out),
            &[x],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let mut dx = Vec::with_capacity(n * c * hw);
                for &g in args.grad.data() {
                    dx.extend(std::iter::repeat_n(g * inv, hw));
                }
                vec![Some(tensor(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[plane * oh * ow + oy * ow + ox] =
                        xv[plane * h * w + (oy / factor) * w + ox / factor];
                }
            }
        }
        self.push_op(
            tensor(&[n, c, oh, ow], out),
            &[x],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let g = args.grad.data();
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[plane * h * w + (oy / factor) * w + ox / factor] +=
                                g[plane * oh * ow + oy * ow + ox];
                        }
                    }
                }
                vec![Some(tensor(&[n, c, h, w], dx))]
            }),
        )
    }

    /// Spatial window `[top..top+h, left..left+w]` of every plane.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, ch: usize, cw: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(top + ch <= h && left + cw <= w, "crop2d: window outside {h}x{w}");
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ch * cw);
        for plane in 0..n * c {
            for y in top..top + ch {
                let start = plane * h * w + y * w + left;
                out.extend_from_slice(&xv[start..start + cw]);
            }
        }
        self.push_op(
            tensor(&[n, c, ch, cw], out),
            &[x],
            Box::new(move |args: &BackwardArgs<'_, T>| {
                let g = args.grad.data();
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for (yy, y) in (top..top + ch).enumerate() {
                        let dst = plane * h * w + y * w + left;
                        let src = (plane * ch + yy) * cw;
                        dx[dst..dst + cw].copy_from_slice(&g[src..src + cw]);
                    }
                }
                vec![Some(tensor(&[n, c, h, w], dx))]
            }),
        )
    }
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

    /// Direct seven-loop convolution.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 2, 0), (1, 1, 0)] {
            let x = rnd(&[2, 3, 9, 8], 1);
            let w = rnd(&[4, 3, k, k], 2);
            let mut g = Graph::<f64>::inference();
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let y = g.conv2d(xv, wv, None, s, p);
            let expected = conv_oracle(&x, &w, s, p);
            assert_eq!(g.value(y).shape(), expected.shape());
            assert!(g.value(y).max_abs_diff(&expected) < 1e-12, "k={k} s={s} p={p}");
        }
    }

    #[test]
    fn conv_grad() {
        for &(k, s, p) in &[(3, 2, 1), (1, 1, 0)] {
            check(
                &[rnd(&[2, 2, 5, 5], 3), rnd(&[3, 2, k, k], 4), rnd(&[3], 5)],
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), s, p);
                    let m = g.constant(rnd(g.value(y).shape(), 6));
                    let y = g.add(y, m);
                    let y = g.relu(y);
                    g.sum_all(y)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn pool_upsample_crop_grad() {
        check(
            &[rnd(&[1, 2, 6, 6], 7)],
            |g, v| {
                let p = g.max_pool2d(v[0], 3, 2, 1);
                let u = g.upsample_nearest(p, 2);
                let c = g.crop2d(u, 1, 2, 3, 3);
                let m = g.constant(rnd(&[1, 2, 3, 3], 8));
                let c = g.add(c, m);
                let c = g.relu(c);
                let pooled = g.global_avg_pool(c);
                g.sum_all(pooled)
            },
            1e-6,
        );
    }

    #[test]
    fn global_pool_of_fixture() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = g.global_avg_pool(x);
        assert_eq!(g.value(y).data(), &[4.0]);
    }
}
