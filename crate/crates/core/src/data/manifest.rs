//! Patch manifest CSV.

use std::collections::BTreeMap;
use std::path::Path;

use super::slide::write_atomic;
use super::tiling::{ContextGroup, PatchRecord, Role};
use crate::error::{Error, Result};

pub const HEADER: [&str; 11] = [
    "patch_id",
    "slide_id",
    "role",
    "origin_x",
    "origin_y",
    "window",
    "output_size",
    "tissue_fraction",
    "group_id",
    "slot_index",
    "label_path",
];

pub fn to_csv(groups: &[ContextGroup]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HEADER)?;
    for p in groups.iter().flat_map(ContextGroup::patches) {
        w.write_record([
            p.patch_id.clone(),
            p.slide_id.clone(),
            p.role.to_string(),
            p.origin_x.to_string(),
            p.origin_y.to_string(),
            p.window.to_string(),
            p.output_size.to_string(),
            p.tissue_fraction.to_string(),
            p.group_id.clone(),
            p.slot_index.to_string(),
            p.label_path.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv buffer: {e}")))
}

pub fn write_manifest(groups: &[ContextGroup], path: &Path) -> Result<()> {
    write_atomic(path, &to_csv(groups)?)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ContextGroup>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&bytes, &path.display().to_string())
}

/// Parses manifest bytes; `file` names the source in errors.
pub fn parse_manifest(bytes: &[u8], file: &str) -> Result<Vec<ContextGroup>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::Parse {
            file: file.into(),
            line: 1,
            field: "header".into(),
            message: format!("expected `{}`", HEADER.join(",")),
        });
    }
    let mut contexts: BTreeMap<String, PatchRecord> = BTreeMap::new();
    let mut targets: BTreeMap<String, BTreeMap<i32, PatchRecord>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            file: file.into(),
            line,
            field: String::new(),
            message: e.to_string(),
        })?;
        let rec = parse_row(&row, file, line)?;
        if !contexts.contains_key(&rec.group_id) && !targets.contains_key(&rec.group_id) {
            order.push(rec.group_id.clone());
        }
        let dup = match rec.role {
            Role::Context => contexts.insert(rec.group_id.clone(), rec.clone()).is_some(),
            Role::Target => targets
                .entry(rec.group_id.clone())
                .or_default()
                .insert(rec.slot_index, rec.clone())
                .is_some(),
        };
        if dup {
            return Err(Error::Validation(format!(
                "{file}:{line}: duplicate patch for group {} slot {}",
                rec.group_id, rec.slot_index
            )));
        }
    }
    let m = targets
        .values()
        .flat_map(|t| t.keys())
        .map(|&s| s as usize + 1)
        .max()
        .unwrap_or(0);
    let mut groups = Vec::with_capacity(order.len());
    for gid in order {
        let context = contexts.remove(&gid).ok_or_else(|| {
            Error::Validation(format!("group references unknown patch: group {gid} has no context patch"))
        })?;
        let mut slots = targets.remove(&gid).unwrap_or_default();
        let mut list = Vec::with_capacity(m);
        for s in 0..m as i32 {
            list.push(slots.remove(&s).ok_or_else(|| {
                Error::Validation(format!("group references unknown patch: group {gid} slot {s}"))
            })?);
        }
        groups.push(ContextGroup {
            group_id: gid,
            context,
            targets: list,
        });
    }
    Ok(groups)
}

fn parse_row(row: &csv::StringRecord, file: &str, line: usize) -> Result<PatchRecord> {
    let get = |i: usize| row.get(i).unwrap_or("");
    let err = |i: usize, message: String| Error::Parse {
        file: file.into(),
        line,
        field: HEADER[i].into(),
        message,
    };
    if row.len() != HEADER.len() {
        return Err(err(row.len().min(HEADER.len() - 1), format!("expected {} fields, found {}", HEADER.len(), row.len())));
    }
    fn num<N: std::str::FromStr>(s: &str) -> std::result::Result<N, String> {
        s.parse::<N>().map_err(|_| format!("cannot parse `{s}`"))
    }
    let role = match get(2) {
        "context" => Role::Context,
        "target" => Role::Target,
        other => return Err(err(2, format!("unknown role `{other}`"))),
    };
    let nonempty = |i: usize| {
        if get(i).is_empty() {
            Err(err(i, "empty".into()))
        } else {
            Ok(get(i).to_string())
        }
    };
    let rec = PatchRecord {
        patch_id: nonempty(0)?,
        slide_id: nonempty(1)?,
        role,
        origin_x: num(get(3)).map_err(|m| err(3, m))?,
        origin_y: num(get(4)).map_err(|m| err(4, m))?,
        window: num(get(5)).map_err(|m| err(5, m))?,
        output_size: num(get(6)).map_err(|m| err(6, m))?,
        tissue_fraction: num(get(7)).map_err(|m| err(7, m))?,
        group_id: nonempty(8)?,
        slot_index: num(get(9)).map_err(|m| err(9, m))?,
        label_path: Some(get(10).to_string()).filter(|s| !s.is_empty()),
    };
    if !(0.0..=1.0).contains(&rec.tissue_fraction) {
        return Err(err(7, format!("{} outside [0, 1]", rec.tissue_fraction)));
    }
    let slot_ok = match role {
        Role::Context => rec.slot_index == -1,
        Role::Target => rec.slot_index >= 0,
    };
    if !slot_ok {
        return Err(err(9, format!("slot {} invalid for role {role}", rec.slot_index)));
    }
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::slide::SlideSource;
    use crate::data::tiling::{tile_slide, TilingConfig};
    use image::RgbImage;

    fn groups() -> Vec<ContextGroup> {
        let slide = SlideSource {
            slide_id: "a".into(),
            image_low: RgbImage::from_pixel(1536, 1024, image::Rgb([100, 100, 100])),
            image_high: RgbImage::from_pixel(6144, 4096, image::Rgb([100, 100, 100])),
            label_high: None,
            magnification_low: 10.0,
            magnification_high: 40.0,
        };
        let mut g = tile_slide(&slide, &TilingConfig::default()).unwrap();
        g[0].targets[3].label_path = Some("labels/x.png".into());
        g[1].context.tissue_fraction = 0.123456789012345;
        g
    }

    #[test]
    fn round_trip() {
        let g = groups();
        assert_eq!(g.len(), 2);
        let bytes = to_csv(&g).unwrap();
        assert_eq!(parse_manifest(&bytes, "m").unwrap(), g);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with(
            "patch_id,slide_id,role,origin_x,origin_y,window,output_size,tissue_fraction,group_id,slot_index,label_path\n"
        ));
    }

    #[test]
    fn empty_round_trip() {
        let bytes = to_csv(&[]).unwrap();
        assert!(parse_manifest(&bytes, "m").unwrap().is_empty());
    }

    #[test]
    fn missing_target_row_is_reported() {
        let text = String::from_utf8(to_csv(&groups()).unwrap()).unwrap();
        let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("a_g000_t07,")).collect();
        let err = parse_manifest(kept.join("\n").as_bytes(), "m").unwrap_err();
        assert!(err.to_string().contains("group references unknown patch"), "{err}");
    }

    #[test]
    fn parse_errors_name_line_and_field() {
        let text = String::from_utf8(to_csv(&groups()).unwrap()).unwrap();
        let broken = text.replacen(",1024,32", ",1024,x", 1).replacen(",1024,224,", ",10z4,224,", 1);
        match parse_manifest(broken.as_bytes(), "m.csv") {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "window");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.csv");
        write_manifest(&groups(), &p).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), groups());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
