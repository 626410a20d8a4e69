//! Background/tissue separation by a fixed per-channel RGB threshold.

use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};

/// Inclusive upper bounds on (R, G, B) for a pixel to count as tissue.
pub const TISSUE_MAX: [u8; 3] = [235, 210, 235];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    /// Row-major, `true` = tissue.
    pub data: Vec<bool>,
}

impl TissueMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn fraction(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().filter(|&&t| t).count() as f64 / self.data.len() as f64
    }
}

pub fn is_tissue(px: [u8; 3]) -> bool {
    px.iter().zip(TISSUE_MAX).all(|(&c, m)| c <= m)
}

/// Tissue mask of an 8-bit RGB image. Other pixel formats are rejected.
pub fn compute_tissue_mask(image: &DynamicImage) -> Result<TissueMask> {
    match image {
        DynamicImage::ImageRgb8(rgb) => Ok(tissue_mask_rgb(rgb)),
        other => Err(Error::Format(format!(
            "tissue mask needs 8-bit RGB, got {:?}",
            other.color()
        ))),
    }
}

pub fn tissue_mask_rgb(rgb: &RgbImage) -> TissueMask {
    TissueMask {
        width: rgb.width(),
        height: rgb.height(),
        data: rgb.pixels().map(|p| is_tissue(p.0)).collect(),
    }
}

/// Fraction of tissue pixels in a rectangle of `rgb`.
pub fn tissue_fraction(rgb: &RgbImage, x: u32, y: u32, w: u32, h: u32) -> f64 {
    let mut n = 0usize;
    for yy in y..y + h {
        for xx in x..x + w {
            n += is_tissue(rgb.get_pixel(xx, yy).0) as usize;
        }
    }
    n as f64 / (w as f64 * h as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Rgb};

    #[test]
    fn boundary_and_white() {
        assert!(is_tissue([235, 210, 235]));
        assert!(!is_tissue([255, 255, 255]));
    }

    #[test]
    fn two_by_two_fixture() {
        let pixels = [[0, 0, 0], [255, 255, 255], [236, 210, 235], [235, 211, 235]];
        let img = RgbImage::from_fn(2, 2, |x, y| Rgb(pixels[(y * 2 + x) as usize]));
        let mask = compute_tissue_mask(&DynamicImage::ImageRgb8(img)).unwrap();
        let oracle: Vec<bool> = pixels
            .iter()
            .map(|p| p[0] <= 235 && p[1] <= 210 && p[2] <= 235)
            .collect();
        assert_eq!(mask.data, oracle);
        assert_eq!(mask.data, vec![true, false, false, false]);
    }

    #[test]
    fn non_rgb_rejected() {
        let gray = DynamicImage::ImageLuma8(GrayImage::new(2, 2));
        assert!(matches!(compute_tissue_mask(&gray), Err(Error::Format(_))));
    }
}
