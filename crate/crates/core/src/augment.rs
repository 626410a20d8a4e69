//! The two stochastic views fed to every pretext task.

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor;

/// Augmentation parameters. Defaults follow the standard SimSiam recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: [f64; 2],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: [0.1, 2.0],
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentConfig {
    /// Every random operation disabled: the view is the normalised input.
    pub fn identity() -> Self {
        AugmentConfig {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_p, self.jitter_p, self.grayscale_p, self.blur_p];
        let ok = probs.iter().all(|p| (0.0..=1.0).contains(p))
            && 0.0 < self.crop_scale[0]
            && self.crop_scale[0] <= self.crop_scale[1]
            && self.crop_scale[1] <= 1.0
            && 0.0 < self.crop_ratio[0]
            && self.crop_ratio[0] <= self.crop_ratio[1]
            && (0.0..=0.5).contains(&self.hue)
            && [self.brightness, self.contrast, self.saturation].iter().all(|&v| (0.0..1.0).contains(&v))
            && 0.0 < self.blur_sigma[0]
            && self.blur_sigma[0] <= self.blur_sigma[1]
            && self.std.iter().all(|&s| s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation config {self:?}")))
        }
    }

    /// Smallest and largest value a normalised channel can take.
    pub fn value_bounds(&self) -> (f32, f32) {
        let lo = (0..3).map(|c| (-self.mean[c] / self.std[c]) as f32).fold(f32::INFINITY, f32::min);
        let hi = (0..3)
            .map(|c| ((1.0 - self.mean[c]) / self.std[c]) as f32)
            .fold(f32::NEG_INFINITY, f32::max);
        (lo, hi)
    }
}

/// Planar RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
struct Planes {
    w: usize,
    h: usize,
    c: [Vec<f32>; 3],
}

impl Planes {
    fn from_rgb(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut c: [Vec<f32>; 3] = std::array::from_fn(|_| Vec::with_capacity(w * h));
        for p in img.pixels() {
            for k in 0..3 {
                c[k].push(p.0[k] as f32 / 255.0);
            }
        }
        Planes { w, h, c }
    }

    fn gray(&self, i: usize) -> f32 {
        0.299 * self.c[0][i] + 0.587 * self.c[1][i] + 0.114 * self.c[2][i]
    }
}

/// Torchvision's crop-box sampler: ten tries, then a centre crop.
fn sample_crop<R: Rng + ?Sized>(w: usize, h: usize, scale: [f64; 2], ratio: [f64; 2], rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (w * h) as f64;
    let (lr0, lr1) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale[0], scale[1]);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if 0 < cw && cw <= w && 0 < ch && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio[0] {
        (w, (w as f64 / ratio[0]).round() as usize)
    } else if in_ratio > ratio[1] {
        ((h as f64 * ratio[1]).round() as usize, h)
    } else {
        (w, h)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Bilinear resample of a crop to `out x out`, half-pixel centres.
fn resized_crop(p: &Planes, top: usize, left: usize, ch: usize, cw: usize, out: usize) -> Planes {
    let sy = ch as f32 / out as f32;
    let sx = cw as f32 / out as f32;
    let coord = |o: usize, s: f32, n: usize| {
        let f = ((o as f32 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f32);
        let i = f.floor() as usize;
        (i, (i + 1).min(n - 1), f - i as f32)
    };
    let xs: Vec<_> = (0..out).map(|o| coord(o, sx, cw)).collect();
    let mut c: [Vec<f32>; 3] = std::array::from_fn(|_| vec![0.0; out * out]);
    for oy in 0..out {
        let (y0, y1, ty) = coord(oy, sy, ch);
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            for k in 0..3 {
                let at = |y: usize, x: usize| p.c[k][(top + y) * p.w + left + x];
                let a = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * tx;
                let b = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * tx;
                c[k][oy * out + ox] = a + (b - a) * ty;
            }
        }
    }
    Planes { w: out, h: out, c }
}

fn hflip(p: &mut Planes) {
    for ch in p.c.iter_mut() {
        for row in ch.chunks_mut(p.w) {
            row.reverse();
        }
    }
}

fn blend(p: &mut Planes, other: impl Fn(&Planes, usize, usize) -> f32, factor: f32) {
    let n = p.w * p.h;
    let src = p.clone();
    for k in 0..3 {
        for i in 0..n {
            let o = other(&src, k, i);
            p.c[k][i] = (factor * src.c[k][i] + (1.0 - factor) * o).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn shift_hue(p: &mut Planes, delta: f32) {
    for i in 0..p.w * p.h {
        let (h, s, v) = rgb_to_hsv(p.c[0][i], p.c[1][i], p.c[2][i]);
        let (r, g, b) = hsv_to_rgb(h + delta, s, v);
        p.c[0][i] = r;
        p.c[1][i] = g;
        p.c[2][i] = b;
    }
}

fn color_jitter<R: Rng + ?Sized>(p: &mut Planes, cfg: &AugmentConfig, rng: &mut R) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => {
                let f = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness) as f32;
                blend(p, |_, _, _| 0.0, f);
            }
            1 => {
                let f = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast) as f32;
                let n = p.w * p.h;
                let mean = (0..n).map(|i| p.gray(i)).sum::<f32>() / n as f32;
                blend(p, |_, _, _| mean, f);
            }
            2 => {
                let f = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation) as f32;
                blend(p, |s, _, i| s.gray(i), f);
            }
            _ => {
                let d = uniform(rng, -cfg.hue, cfg.hue) as f32;
                shift_hue(p, d);
            }
        }
    }
}

fn grayscale(p: &mut Planes) {
    for i in 0..p.w * p.h {
        let g = p.gray(i);
        for k in 0..3 {
            p.c[k][i] = g;
        }
    }
}

/// Separable Gaussian with radius `ceil(3 sigma)` and mirrored borders.
fn gaussian_blur(p: &mut Planes, sigma: f32) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let (w, h) = (p.w, p.h);
    for ch in p.c.iter_mut() {
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * ch[y * w + reflect(x as isize + j as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                ch[y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(j, k)| k * tmp[reflect(y as isize + j as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
}

/// One random view of a square patch as a normalised `[3, s, s]` tensor.
pub fn make_view<R: Rng + ?Sized>(image: &RgbImage, expected_size: u32, cfg: &AugmentConfig, rng: &mut R) -> Result<Tensor<f32>> {
    if image.dimensions() != (expected_size, expected_size) {
        return Err(Error::Precondition(format!(
            "augmentation expects {expected_size}x{expected_size}, got {:?}",
            image.dimensions()
        )));
    }
    let s = expected_size as usize;
    let src = Planes::from_rgb(image);
    let (top, left, ch, cw) = sample_crop(s, s, cfg.crop_scale, cfg.crop_ratio, rng);
    let mut p = resized_crop(&src, top, left, ch, cw, s);
    if rng.random::<f64>() < cfg.flip_p {
        hflip(&mut p);
    }
    if rng.random::<f64>() < cfg.jitter_p {
        color_jitter(&mut p, cfg, rng);
    }
    if rng.random::<f64>() < cfg.grayscale_p {
        grayscale(&mut p);
    }
    if rng.random::<f64>() < cfg.blur_p {
        let sigma = uniform(rng, cfg.blur_sigma[0], cfg.blur_sigma[1]) as f32;
        gaussian_blur(&mut p, sigma);
    }
    Ok(normalize(p, cfg))
}

fn normalize(p: Planes, cfg: &AugmentConfig) -> Tensor<f32> {
    let (w, h) = (p.w, p.h);
    let mut data = Vec::with_capacity(3 * w * h);
    for (k, ch) in p.c.into_iter().enumerate() {
        let (m, s) = (cfg.mean[k] as f32, cfg.std[k] as f32);
        data.extend(ch.into_iter().map(|v| (v - m) / s));
    }
    Tensor::new(vec![3, h, w], data).expect("planar shape")
}

/// The normalised input without any random operation.
pub fn normalized(image: &RgbImage, cfg: &AugmentConfig) -> Tensor<f32> {
    normalize(Planes::from_rgb(image), cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Tensor<f32>,
    pub view2: Tensor<f32>,
    pub patch_id: String,
    pub seeds: [u64; 2],
}

/// Two views drawn from independent streams derived from `seed`.
pub fn make_view_pair(image: &RgbImage, patch_id: &str, expected_size: u32, cfg: &AugmentConfig, seed: u64) -> Result<ViewPair> {
    let seeds = [
        seeding::derive(seed, &["view".into(), 1u64.into()]),
        seeding::derive(seed, &["view".into(), 2u64.into()]),
    ];
    let view = |s: u64| make_view(image, expected_size, cfg, &mut seeding::rng(s, &[]));
    Ok(ViewPair {
        view1: view(seeds[0])?,
        view2: view(seeds[1])?,
        patch_id: patch_id.to_string(),
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn patch(seed: u64) -> RgbImage {
        let mut r = seeding::rng(seed, &[]);
        RgbImage::from_fn(32, 32, |_, _| Rgb([r.random(), r.random(), r.random()]))
    }

    #[test]
    fn identity_path_is_normalisation() {
        let img = patch(0);
        let cfg = AugmentConfig::identity();
        let v = make_view(&img, 32, &cfg, &mut seeding::rng(1, &[])).unwrap();
        assert_eq!(v, normalized(&img, &cfg));
        let p = img.get_pixel(3, 5).0;
        let expect = (p[1] as f32 / 255.0 - 0.456) / 0.224;
        assert!((v.data()[32 * 32 + 5 * 32 + 3] - expect).abs() < 1e-6);
    }

    #[test]
    fn deterministic_under_seed() {
        let img = patch(1);
        let cfg = AugmentConfig::default();
        let a = make_view(&img, 32, &cfg, &mut seeding::rng(5, &[])).unwrap();
        let b = make_view(&img, 32, &cfg, &mut seeding::rng(5, &[])).unwrap();
        assert_eq!(a, b);
        let pair = make_view_pair(&img, "p", 32, &cfg, 9).unwrap();
        assert_eq!(pair, make_view_pair(&img, "p", 32, &cfg, 9).unwrap());
        assert_ne!(pair.view1, pair.view2);
        assert_ne!(pair.seeds[0], pair.seeds[1]);
    }

    #[test]
    fn no_op_config_gives_equal_views() {
        let pair = make_view_pair(&patch(2), "p", 32, &AugmentConfig::identity(), 3).unwrap();
        assert_eq!(pair.view1, pair.view2);
    }

    #[test]
    fn wrong_size_rejected() {
        let img = RgbImage::new(30, 32);
        assert!(matches!(
            make_view(&img, 32, &AugmentConfig::default(), &mut seeding::rng(0, &[])),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn values_stay_within_normalisation_bounds() {
        let cfg = AugmentConfig::default();
        let lo = (0..3).map(|c| (-cfg.mean[c] / cfg.std[c]) as f32).fold(f32::MAX, f32::min);
        let hi = (0..3).map(|c| ((1.0 - cfg.mean[c]) / cfg.std[c]) as f32).fold(f32::MIN, f32::max);
        for (seed, fill) in [(0, [0u8; 3]), (1, [255u8; 3])] {
            let img = RgbImage::from_pixel(32, 32, Rgb(fill));
            for s in 0..20 {
                let v = make_view(&img, 32, &cfg, &mut seeding::rng(seed * 100 + s, &[])).unwrap();
                assert!(v.data().iter().all(|&x| x >= lo - 1e-5 && x <= hi + 1e-5));
            }
        }
        assert_eq!(cfg.value_bounds(), (lo, hi));
    }

    #[test]
    fn flip_rate_near_half() {
        // Asymmetric image; with everything but flipping disabled a view is
        // either the input or its mirror.
        let img = RgbImage::from_fn(32, 32, |x, _| Rgb([(x * 8) as u8, 0, 0]));
        let cfg = AugmentConfig {
            flip_p: 0.5,
            ..AugmentConfig::identity()
        };
        let plain = normalized(&img, &cfg);
        let mut flipped = 0;
        for s in 0..1000u64 {
            let pair = make_view_pair(&img, "p", 32, &cfg, s).unwrap();
            flipped += (pair.view1 != plain) as usize;
        }
        assert!((450..=550).contains(&flipped), "{flipped}");
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.5, 0.9), (0.9, 0.1, 0.1), (0.3, 0.3, 0.3), (0.0, 1.0, 0.5)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }
}
