//! Patch rasters on disk: `patches/<patch_id>.png`, `labels/<patch_id>.png`
//! and `manifest.csv`, all relative to one dataset directory.

use std::path::{Path, PathBuf};

use super::manifest::write_manifest;
use super::slide::{read_gray, read_rgb, write_gray, write_rgb, SlideIndex};
use super::tiling::{render_group, tile_slide, ContextGroup, GroupPixels, PatchPixels, PatchRecord, TilingConfig};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.csv";

pub fn patch_image_path(root: &Path, patch_id: &str) -> PathBuf {
    root.join("patches").join(format!("{patch_id}.png"))
}

fn ensure_dirs(root: &Path) -> Result<()> {
    for d in ["patches", "labels"] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Writes the rasters of one group and fills in its label paths.
pub fn write_group(root: &Path, pixels: &mut GroupPixels) -> Result<()> {
    ensure_dirs(root)?;
    let GroupPixels { group, context, targets } = pixels;
    let records = std::iter::once(&mut group.context).chain(group.targets.iter_mut());
    for (rec, px) in records.zip(std::iter::once(&*context).chain(targets.iter())) {
        write_rgb(&patch_image_path(root, &rec.patch_id), &px.image)?;
        if let Some(label) = &px.label {
            let rel = format!("labels/{}.png", rec.patch_id);
            write_gray(&root.join(&rel), label)?;
            rec.label_path = Some(rel);
        }
    }
    Ok(())
}

/// Tiles every slide of an index and writes patches plus `manifest.csv`
/// under `out`. Slides are loaded one at a time.
pub fn tile_dataset(index_path: &Path, cfg: &TilingConfig, out: &Path) -> Result<Vec<ContextGroup>> {
    let index = SlideIndex::read(index_path)?;
    let root = index_path.parent().unwrap_or(Path::new("."));
    let mut all = Vec::new();
    for entry in &index.slides {
        let slide = index.load(root, entry)?;
        for group in tile_slide(&slide, cfg)? {
            let mut px = render_group(&slide, &group)?;
            write_group(out, &mut px)?;
            all.push(px.group);
        }
        log::info!("tiled {}", entry.slide_id);
    }
    write_manifest(&all, &out.join(MANIFEST))?;
    Ok(all)
}

fn load_patch(root: &Path, rec: &PatchRecord) -> Result<PatchPixels> {
    let image = read_rgb(&patch_image_path(root, &rec.patch_id))?;
    let s = rec.output_size;
    if image.dimensions() != (s, s) {
        return Err(Error::Validation(format!(
            "patch {} is {:?}, manifest says {s}x{s}",
            rec.patch_id,
            image.dimensions()
        )));
    }
    let label = rec
        .label_path
        .as_ref()
        .map(|p| read_gray(&root.join(p)))
        .transpose()?;
    Ok(PatchPixels { image, label })
}

/// Loads the rasters of `groups` from the dataset directory `root`.
pub fn load_groups(root: &Path, groups: &[ContextGroup]) -> Result<Vec<GroupPixels>> {
    groups
        .iter()
        .map(|g| {
            Ok(GroupPixels {
                group: g.clone(),
                context: load_patch(root, &g.context)?,
                targets: g.targets.iter().map(|t| load_patch(root, t)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::read_manifest;
    use crate::data::synth::{generate_synthetic_dataset, SynthConfig};

    #[test]
    fn synth_tile_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            slides: 1,
            low_size: 256,
            classes: 2,
            ratio: 4,
            class_fractions: Vec::new(),
            seed: 1,
        };
        generate_synthetic_dataset(&cfg, dir.path()).unwrap();
        let tiling = TilingConfig {
            context_window: 128,
            context_step: 128,
            target_window: 32,
            target_step: 32,
            output_size: 32,
            min_tissue_fraction: 0.1,
        };
        let out = dir.path().join("tiles");
        let groups = tile_dataset(&dir.path().join("slides.json"), &tiling, &out).unwrap();
        assert_eq!(groups.len(), 4);
        assert_eq!(read_manifest(&out.join(MANIFEST)).unwrap(), groups);
        let px = load_groups(&out, &groups).unwrap();
        assert_eq!(px[0].targets.len(), 16);
        assert_eq!(px[0].targets[0].label.as_ref().unwrap().dimensions(), (32, 32));
    }
}
