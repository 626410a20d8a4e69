//! Two-level slide rasters and their on-disk index.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{GrayImage, ImageEncoder, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SlideSource {
    pub slide_id: String,
    pub image_low: RgbImage,
    pub image_high: RgbImage,
    /// Class index per pixel of `image_high`.
    pub label_high: Option<GrayImage>,
    pub magnification_low: f64,
    pub magnification_high: f64,
}

impl SlideSource {
    /// Integer magnification ratio between the two levels.
    pub fn ratio(&self) -> Result<u32> {
        integer_ratio(self.magnification_low, self.magnification_high)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.ratio()?;
        let (lw, lh) = self.image_low.dimensions();
        let (hw, hh) = self.image_high.dimensions();
        if hw != lw * r || hh != lh * r {
            return Err(Error::Precondition(format!(
                "slide {}: high level {hw}x{hh} is not {r} x low level {lw}x{lh}",
                self.slide_id
            )));
        }
        if let Some(label) = &self.label_high {
            if label.dimensions() != (hw, hh) {
                return Err(Error::Precondition(format!(
                    "slide {}: label map {:?} differs from high level {hw}x{hh}",
                    self.slide_id,
                    label.dimensions()
                )));
            }
        }
        Ok(())
    }
}

pub fn integer_ratio(low: f64, high: f64) -> Result<u32> {
    if !(low > 0.0 && high > 0.0) {
        return Err(Error::Precondition(format!("magnifications must be positive, got {low} and {high}")));
    }
    let r = high / low;
    if r < 1.0 || (r - r.round()).abs() > 1e-9 {
        return Err(Error::Precondition(format!("magnification ratio {r} is not a positive integer")));
    }
    Ok(r.round() as u32)
}

/// Entry of `slides.json`; paths are relative to the index file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideEntry {
    pub slide_id: String,
    pub image_low: String,
    pub image_high: String,
    #[serde(default)]
    pub label_high: Option<String>,
    pub magnification_low: f64,
    pub magnification_high: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideIndex {
    pub classes: usize,
    pub slides: Vec<SlideEntry>,
}

impl SlideIndex {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            field: String::new(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(&self, root: &Path, entry: &SlideEntry) -> Result<SlideSource> {
        let slide = SlideSource {
            slide_id: entry.slide_id.clone(),
            image_low: read_rgb(&root.join(&entry.image_low))?,
            image_high: read_rgb(&root.join(&entry.image_high))?,
            label_high: entry
                .label_high
                .as_ref()
                .map(|p| read_gray(&root.join(p)))
                .transpose()?,
            magnification_low: entry.magnification_low,
            magnification_high: entry.magnification_high,
        };
        slide.validate()?;
        Ok(slide)
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        other => Err(Error::Format(format!(
            "{}: expected 8-bit RGB, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::Format(format!(
            "{}: expected 8-bit single channel, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn write_png(path: &Path, bytes: &[u8], w: u32, h: u32, color: image::ExtendedColorType) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PngEncoder::new_with_quality(BufWriter::new(file), CompressionType::Fast, FilterType::Sub);
    enc.write_image(bytes, w, h, color).map_err(|e| image_err(path, e))
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_png(path, img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    write_png(path, img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slide(low: u32, high: u32) -> SlideSource {
        SlideSource {
            slide_id: "s".into(),
            image_low: RgbImage::new(low, low),
            image_high: RgbImage::new(high, high),
            label_high: None,
            magnification_low: 10.0,
            magnification_high: 40.0,
        }
    }

    #[test]
    fn level_dimensions_checked() {
        slide(8, 32).validate().unwrap();
        assert!(matches!(slide(8, 30).validate(), Err(Error::Precondition(_))));
        let mut s = slide(8, 32);
        s.label_high = Some(GrayImage::new(31, 32));
        assert!(s.validate().is_err());
    }

    #[test]
    fn ratio_must_be_integer() {
        assert_eq!(integer_ratio(10.0, 40.0).unwrap(), 4);
        assert!(integer_ratio(10.0, 25.0).is_err());
        assert!(integer_ratio(0.0, 25.0).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let p = dir.path().join("a.png");
        write_rgb(&p, &img).unwrap();
        assert_eq!(read_rgb(&p).unwrap(), img);
        assert!(read_gray(&p).is_err());
    }
}
