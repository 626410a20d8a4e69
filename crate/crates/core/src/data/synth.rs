//! Procedural two-level slides with exact label maps.
//!
//! A smooth multi-octave value-noise field is cut at per-slide quantiles so
//! each class covers its requested share of pixels. Every class is rendered
//! with its own stain colour and texture scale; the low level is the box
//! average of the high level.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::slide::{write_gray, write_rgb, SlideEntry, SlideIndex, SlideSource};
use crate::error::{Error, Result};
use crate::seeding;

pub const MAGNIFICATION_LOW: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub slides: usize,
    /// Side of the square low level, pixels.
    pub low_size: u32,
    pub classes: usize,
    pub ratio: u32,
    /// Share of pixels per class; uniform when empty.
    pub class_fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            slides: 8,
            low_size: 2048,
            classes: 3,
            ratio: 4,
            class_fractions: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn fractions(&self) -> Vec<f64> {
        if self.class_fractions.is_empty() {
            vec![1.0 / self.classes as f64; self.classes]
        } else {
            self.class_fractions.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.slides == 0 || self.low_size == 0 || self.ratio == 0 {
            return bad("slides, low_size and ratio must be positive".into());
        }
        if self.classes == 0 || self.classes > 255 {
            return bad(format!("classes = {} outside 1..=255", self.classes));
        }
        let f = self.fractions();
        if f.len() != self.classes {
            return bad(format!("{} class_fractions for {} classes", f.len(), self.classes));
        }
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!("class_fractions {f:?} must be in [0, 1] and sum to 1"));
        }
        Ok(())
    }
}

/// Value noise on a square lattice with smoothstep interpolation.
struct Lattice {
    cell: f32,
    side: usize,
    values: Vec<f32>,
}

impl Lattice {
    fn new<R: Rng>(extent: u32, cell: f32, rng: &mut R) -> Self {
        let side = (extent as f32 / cell).ceil() as usize + 2;
        Lattice {
            cell,
            side,
            values: (0..side * side).map(|_| rng.random::<f32>()).collect(),
        }
    }

    fn sample(&self, x: f32, y: f32) -> f32 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx as usize, fy as usize);
        let s = |t: f32| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(fx - ix as f32), s(fy - iy as f32));
        let v = |i: usize, j: usize| self.values[j * self.side + i];
        let top = v(ix, iy) + (v(ix + 1, iy) - v(ix, iy)) * tx;
        let bot = v(ix, iy + 1) + (v(ix + 1, iy + 1) - v(ix, iy + 1)) * tx;
        top + (bot - top) * ty
    }
}

struct Field {
    octaves: Vec<(Lattice, f32)>,
}

impl Field {
    fn sample(&self, x: f32, y: f32) -> f32 {
        self.octaves.iter().map(|(l, w)| w * l.sample(x, y)).sum()
    }
}

/// H&E-like base colours; classes past the table get hashed hues.
fn class_colour(class: usize) -> [f32; 3] {
    const TABLE: [[f32; 3]; 5] = [
        [214.0, 140.0, 182.0],
        [128.0, 64.0, 156.0],
        [70.0, 56.0, 132.0],
        [190.0, 110.0, 110.0],
        [160.0, 150.0, 200.0],
    ];
    TABLE.get(class).copied().unwrap_or_else(|| {
        let mut r = seeding::rng(class as u64, &["colour".into()]);
        [r.random_range(60.0..220.0), r.random_range(40.0..200.0), r.random_range(80.0..220.0)]
    })
}

const CHANNEL_MAX: [f32; 3] = [230.0, 205.0, 230.0];

pub fn generate_slide(cfg: &SynthConfig, index: usize) -> Result<SlideSource> {
    cfg.validate()?;
    let high = cfg.low_size * cfg.ratio;
    let slide_id = format!("slide_{index:03}");
    let mut rng = seeding::rng(cfg.seed, &["synth".into(), index.into()]);
    let base = high as f32 / 3.0;
    let field = Field {
        octaves: (0..3)
            .map(|o| (Lattice::new(high, base / (1 << o) as f32, &mut rng), 0.5f32.powi(o)))
            .collect(),
    };
    let textures: Vec<Lattice> = (0..cfg.classes)
        .map(|c| Lattice::new(high, (4 + 6 * (c % 4)) as f32 * cfg.ratio as f32, &mut rng))
        .collect();
    let jitter: [f32; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
    let thresholds = quantile_thresholds(&field, high, &cfg.fractions());

    let mut label = GrayImage::new(high, high);
    let mut image = RgbImage::new(high, high);
    let mut grain = seeding::rng(cfg.seed, &["grain".into(), index.into()]);
    for y in 0..high {
        for x in 0..high {
            let v = field.sample(x as f32, y as f32);
            let class = thresholds.iter().filter(|&&t| v >= t).count();
            label.put_pixel(x, y, Luma([class as u8]));
            let tex = textures[class].sample(x as f32, y as f32) - 0.5;
            let noise: f32 = grain.random_range(-8.0..8.0);
            let base = class_colour(class);
            let px: [u8; 3] = std::array::from_fn(|c| {
                (base[c] + jitter[c] + 70.0 * tex + noise).clamp(20.0, CHANNEL_MAX[c]).round() as u8
            });
            image.put_pixel(x, y, Rgb(px));
        }
    }
    let image_low = box_downsample(&image, cfg.ratio);
    Ok(SlideSource {
        slide_id,
        image_low,
        image_high: image,
        label_high: Some(label),
        magnification_low: MAGNIFICATION_LOW,
        magnification_high: MAGNIFICATION_LOW * cfg.ratio as f64,
    })
}

/// Cut points of the field so that class `k` takes `fractions[k]` of the
/// pixels, estimated on every 4th pixel per axis.
fn quantile_thresholds(field: &Field, extent: u32, fractions: &[f64]) -> Vec<f32> {
    let mut samples: Vec<f32> = (0..extent)
        .step_by(4)
        .flat_map(|y| (0..extent).step_by(4).map(move |x| (x, y)))
        .map(|(x, y)| field.sample(x as f32, y as f32))
        .collect();
    samples.sort_by(f32::total_cmp);
    let n = samples.len();
    let mut cum = 0.0;
    fractions[..fractions.len() - 1]
        .iter()
        .map(|f| {
            cum += f;
            let i = ((cum * n as f64).round() as usize).min(n - 1);
            if cum >= 1.0 {
                f32::INFINITY
            } else {
                samples[i]
            }
        })
        .collect()
}

pub fn box_downsample(src: &RgbImage, factor: u32) -> RgbImage {
    let (w, h) = (src.width() / factor, src.height() / factor);
    let area = factor * factor;
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0u32; 3];
        for yy in y * factor..(y + 1) * factor {
            for xx in x * factor..(x + 1) * factor {
                let p = src.get_pixel(xx, yy).0;
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
        }
        Rgb(acc.map(|a| ((a + area / 2) / area) as u8))
    })
}

/// Writes every slide under `out/slides/` and the index to `out/slides.json`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig, out: &Path) -> Result<SlideIndex> {
    cfg.validate()?;
    let dir = out.join("slides");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut index = SlideIndex {
        classes: cfg.classes,
        slides: Vec::new(),
    };
    for i in 0..cfg.slides {
        let slide = generate_slide(cfg, i)?;
        let id = &slide.slide_id;
        let entry = SlideEntry {
            slide_id: id.clone(),
            image_low: format!("slides/{id}_low.png"),
            image_high: format!("slides/{id}_high.png"),
            label_high: Some(format!("slides/{id}_label.png")),
            magnification_low: slide.magnification_low,
            magnification_high: slide.magnification_high,
        };
        write_rgb(&out.join(&entry.image_low), &slide.image_low)?;
        write_rgb(&out.join(&entry.image_high), &slide.image_high)?;
        if let (Some(p), Some(l)) = (&entry.label_high, &slide.label_high) {
            write_gray(&out.join(p), l)?;
        }
        log::info!("synthesised {id}");
        index.slides.push(entry);
    }
    index.write(&out.join("slides.json"))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tissue::is_tissue;

    fn cfg(classes: usize) -> SynthConfig {
        SynthConfig {
            slides: 1,
            low_size: 64,
            classes,
            ratio: 4,
            class_fractions: Vec::new(),
            seed: 7,
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate_slide(&cfg(3), 0).unwrap();
        let b = generate_slide(&cfg(3), 0).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_ne!(a.image_high, generate_slide(&cfg(3), 1).unwrap().image_high);
        assert!(a.image_high.pixels().all(|p| is_tissue(p.0)));
    }

    #[test]
    fn single_class_is_uniform() {
        let s = generate_slide(&cfg(1), 0).unwrap();
        assert!(s.label_high.unwrap().pixels().all(|p| p.0[0] == 0));
    }

    #[test]
    fn class_shares_follow_config() {
        let mut c = cfg(3);
        c.class_fractions = vec![0.5, 0.3, 0.2];
        let s = generate_slide(&c, 0).unwrap();
        let label = s.label_high.unwrap();
        let mut counts = [0usize; 3];
        for p in label.pixels() {
            counts[p.0[0] as usize] += 1;
        }
        let n = label.len() as f64;
        for (k, &f) in c.class_fractions.iter().enumerate() {
            assert!((counts[k] as f64 / n - f).abs() <= 0.05, "{counts:?}");
        }
    }

    #[test]
    fn bad_fractions_rejected() {
        let mut c = cfg(2);
        c.class_fractions = vec![0.5, 0.6];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.class_fractions = vec![1.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn box_average() {
        let src = RgbImage::from_fn(4, 2, |x, _| Rgb([x as u8 * 10, 0, 255]));
        let d = box_downsample(&src, 2);
        assert_eq!(d.dimensions(), (2, 1));
        assert_eq!(d.get_pixel(0, 0).0, [5, 0, 255]);
        assert_eq!(d.get_pixel(1, 0).0, [25, 0, 255]);
    }
}
