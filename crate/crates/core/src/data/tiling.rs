//! Context/target tiling and the 1-to-m patch correspondence.

use std::fmt;

use image::imageops::{self, FilterType};
use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::slide::SlideSource;
use super::tissue::tissue_fraction;
use crate::error::{Error, Result};

/// Window sizes and steps are in low-level pixels; target windows are read
/// from the high level at `ratio` times that extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TilingConfig {
    pub context_window: u32,
    pub context_step: u32,
    pub target_window: u32,
    pub target_step: u32,
    pub output_size: u32,
    pub min_tissue_fraction: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            context_window: 1024,
            context_step: 512,
            target_window: 256,
            target_step: 256,
            output_size: 224,
            min_tissue_fraction: 0.1,
        }
    }
}

impl TilingConfig {
    /// Targets per side of one context window.
    pub fn grid(&self) -> u32 {
        self.context_window / self.target_window
    }

    pub fn m(&self) -> usize {
        (self.grid() * self.grid()) as usize
    }

    pub fn validate(&self, ratio: u32) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.context_window == 0 || self.context_step == 0 || self.target_window == 0 || self.output_size == 0 {
            return bad("tiling windows, steps and output_size must be positive".into());
        }
        if self.target_step != self.target_window {
            return bad(format!(
                "target_step {} must equal target_window {} for targets to partition the context",
                self.target_step, self.target_window
            ));
        }
        if self.target_window * ratio != self.context_window {
            return bad(format!(
                "context_window {} must be target_window {} x magnification ratio {ratio}",
                self.context_window, self.target_window
            ));
        }
        if !(0.0..=1.0).contains(&self.min_tissue_fraction) {
            return bad(format!("min_tissue_fraction {} outside [0, 1]", self.min_tissue_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Context,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Context => "context",
            Role::Target => "target",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub patch_id: String,
    pub slide_id: String,
    pub role: Role,
    /// Top-left corner in the patch's own source level.
    pub origin_x: u32,
    pub origin_y: u32,
    /// Square extent in the source level.
    pub window: u32,
    pub output_size: u32,
    pub tissue_fraction: f64,
    pub group_id: String,
    /// -1 for the context patch, row-major slot for targets.
    pub slot_index: i32,
    pub label_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextGroup {
    pub group_id: String,
    pub context: PatchRecord,
    /// Row-major over the context field of view.
    pub targets: Vec<PatchRecord>,
}

impl ContextGroup {
    pub fn m(&self) -> usize {
        self.targets.len()
    }

    pub fn slide_id(&self) -> &str {
        &self.context.slide_id
    }

    pub fn patches(&self) -> impl Iterator<Item = &PatchRecord> {
        std::iter::once(&self.context).chain(&self.targets)
    }
}

/// Axis-aligned rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x0: u64,
    pub y0: u64,
    pub x1: u64,
    pub y1: u64,
}

impl Rect {
    pub fn area(&self) -> u64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Field of view of a patch in high-level pixel coordinates.
pub fn field_of_view(p: &PatchRecord, ratio: u32) -> Rect {
    let (x, y, w) = (p.origin_x as u64, p.origin_y as u64, p.window as u64);
    let r = ratio as u64;
    match p.role {
        Role::Context => Rect {
            x0: x * r,
            y0: y * r,
            x1: (x + w) * r,
            y1: (y + w) * r,
        },
        Role::Target => Rect {
            x0: x,
            y0: y,
            x1: x + w,
            y1: y + w,
        },
    }
}

/// Enumerates context windows on the low level and their `m` targets on the
/// high level; groups whose context tissue fraction is below the threshold
/// are dropped.
pub fn tile_slide(slide: &SlideSource, cfg: &TilingConfig) -> Result<Vec<ContextGroup>> {
    slide.validate()?;
    let r = slide.ratio()?;
    cfg.validate(r)?;
    let (w, h) = slide.image_low.dimensions();
    if w < cfg.context_window || h < cfg.context_window {
        return Ok(Vec::new());
    }
    let origins = |extent: u32| (0..=extent - cfg.context_window).step_by(cfg.context_step as usize);
    let mut groups = Vec::new();
    let mut index = 0usize;
    for oy in origins(h) {
        for ox in origins(w) {
            let group_id = format!("{}_g{index:03}", slide.slide_id);
            index += 1;
            let cw = cfg.context_window;
            let frac = tissue_fraction(&slide.image_low, ox, oy, cw, cw);
            if frac < cfg.min_tissue_fraction {
                continue;
            }
            let context = PatchRecord {
                patch_id: format!("{group_id}_c"),
                slide_id: slide.slide_id.clone(),
                role: Role::Context,
                origin_x: ox,
                origin_y: oy,
                window: cw,
                output_size: cfg.output_size,
                tissue_fraction: frac,
                group_id: group_id.clone(),
                slot_index: -1,
                label_path: None,
            };
            let tw = cfg.target_window * r;
            let mut targets = Vec::with_capacity(cfg.m());
            for ty in 0..cfg.grid() {
                for tx in 0..cfg.grid() {
                    let slot = ty * cfg.grid() + tx;
                    let hx = (ox + tx * cfg.target_step) * r;
                    let hy = (oy + ty * cfg.target_step) * r;
                    targets.push(PatchRecord {
                        patch_id: format!("{group_id}_t{slot:02}"),
                        slide_id: slide.slide_id.clone(),
                        role: Role::Target,
                        origin_x: hx,
                        origin_y: hy,
                        window: tw,
                        output_size: cfg.output_size,
                        tissue_fraction: tissue_fraction(&slide.image_high, hx, hy, tw, tw),
                        group_id: group_id.clone(),
                        slot_index: slot as i32,
                        label_path: None,
                    });
                }
            }
            groups.push(ContextGroup {
                group_id,
                context,
                targets,
            });
        }
    }
    Ok(groups)
}

/// Pixels of one patch at output size.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPixels {
    pub image: RgbImage,
    pub label: Option<GrayImage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupPixels {
    pub group: ContextGroup,
    pub context: PatchPixels,
    pub targets: Vec<PatchPixels>,
}

/// Bilinear (half-pixel centres, filter support widened when shrinking).
pub fn resize_rgb(src: &RgbImage, x: u32, y: u32, window: u32, out: u32) -> RgbImage {
    let crop = imageops::crop_imm(src, x, y, window, window).to_image();
    if window == out {
        return crop;
    }
    imageops::resize(&crop, out, out, FilterType::Triangle)
}

/// Nearest-neighbour class map sampled at pixel centres.
pub fn resize_label(src: &GrayImage, x: u32, y: u32, window: u32, out: u32) -> GrayImage {
    let scale = window as f64 / out as f64;
    let pick = |i: u32| (((i as f64 + 0.5) * scale).floor() as u32).min(window - 1);
    GrayImage::from_fn(out, out, |ox, oy| Luma([src.get_pixel(x + pick(ox), y + pick(oy)).0[0]]))
}

pub fn render_group(slide: &SlideSource, group: &ContextGroup) -> Result<GroupPixels> {
    let r = slide.ratio()?;
    let c = &group.context;
    let s = c.output_size;
    let context = PatchPixels {
        image: resize_rgb(&slide.image_low, c.origin_x, c.origin_y, c.window, s),
        label: slide
            .label_high
            .as_ref()
            .map(|l| resize_label(l, c.origin_x * r, c.origin_y * r, c.window * r, s)),
    };
    let targets = group
        .targets
        .iter()
        .map(|t| PatchPixels {
            image: resize_rgb(&slide.image_high, t.origin_x, t.origin_y, t.window, t.output_size),
            label: slide
                .label_high
                .as_ref()
                .map(|l| resize_label(l, t.origin_x, t.origin_y, t.window, t.output_size)),
        })
        .collect();
    Ok(GroupPixels {
        group: group.clone(),
        context,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank_slide(low: u32) -> SlideSource {
        SlideSource {
            slide_id: "s0".into(),
            image_low: RgbImage::from_pixel(low, low, image::Rgb([120, 80, 140])),
            image_high: RgbImage::from_pixel(low * 4, low * 4, image::Rgb([120, 80, 140])),
            label_high: None,
            magnification_low: 10.0,
            magnification_high: 40.0,
        }
    }

    #[test]
    fn single_group_origins() {
        let cfg = TilingConfig {
            output_size: 32,
            ..TilingConfig::default()
        };
        let groups = tile_slide(&blank_slide(1024), &cfg).unwrap();
        assert_eq!(groups.len(), 1);
        let g = &groups[0];
        assert_eq!(g.m(), 16);
        let mut expected = Vec::new();
        for y in [0, 1024, 2048, 3072] {
            for x in [0, 1024, 2048, 3072] {
                expected.push((x, y));
            }
        }
        let got: Vec<(u32, u32)> = g.targets.iter().map(|t| (t.origin_x, t.origin_y)).collect();
        assert_eq!(got, expected);
        assert!(g.targets.iter().all(|t| t.window == 1024));
        assert_eq!(g.targets[5].slot_index, 5);
    }

    #[test]
    fn too_small_slide_gives_nothing() {
        let cfg = TilingConfig::default();
        assert!(tile_slide(&blank_slide(1023), &cfg).unwrap().is_empty());
    }

    #[test]
    fn mismatched_levels_rejected() {
        let mut s = blank_slide(1024);
        s.image_high = RgbImage::new(4000, 4096);
        assert!(matches!(tile_slide(&s, &TilingConfig::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn background_groups_dropped() {
        let mut s = blank_slide(1024);
        s.image_low = RgbImage::from_pixel(1024, 1024, image::Rgb([255, 255, 255]));
        assert!(tile_slide(&s, &TilingConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn inconsistent_windows_rejected() {
        let cfg = TilingConfig {
            target_window: 128,
            target_step: 128,
            ..TilingConfig::default()
        };
        assert!(matches!(tile_slide(&blank_slide(1024), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_label_picks_centres() {
        let src = GrayImage::from_fn(8, 8, |x, _| Luma([x as u8]));
        let out = resize_label(&src, 0, 0, 8, 4);
        let row: Vec<u8> = (0..4).map(|x| out.get_pixel(x, 0).0[0]).collect();
        assert_eq!(row, vec![1, 3, 5, 7]);
    }
}
