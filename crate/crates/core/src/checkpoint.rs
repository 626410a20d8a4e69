//! Checkpoint directories: one `.npy` array per named parameter or buffer
//! plus a JSON metadata file per component.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::encoder::STAGES;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::npy;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format_version: u32,
    pub branch: String,
    pub stage_widths: [usize; STAGES],
    pub seed: u64,
    pub dtype: String,
    pub params: Vec<String>,
    pub buffers: Vec<String>,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

pub fn read_meta<M: for<'de> Deserialize<'de>>(path: &Path) -> Result<M> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Version(format!("{}: unreadable metadata ({e})", path.display())))?;
    match value.get("format_version").and_then(Value::as_u64) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version(format!(
                "{}: format_version {v}, this build reads {FORMAT_VERSION}",
                path.display()
            )))
        }
        None => return Err(Error::Version(format!("{}: no format_version", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| Error::Version(format!("{}: {e}", path.display())))
}

/// Saves a store under `dir/{params,buffers}/<name>.npy` with `dir/meta.json`.
pub fn save_store<T: Scalar>(dir: &Path, store: &ParamStore<T>, branch: &str, stage_widths: [usize; STAGES], seed: u64) -> Result<()> {
    for (sub, items) in [("params", store.params().collect::<Vec<_>>()), ("buffers", store.buffers().collect())] {
        let d = dir.join(sub);
        mkdir(&d)?;
        for (name, t) in items {
            npy::write(&d.join(format!("{name}.npy")), t)?;
        }
    }
    write_json(
        &dir.join("meta.json"),
        &StoreMeta {
            format_version: FORMAT_VERSION,
            branch: branch.to_string(),
            stage_widths,
            seed,
            dtype: T::NPY_DESCR.to_string(),
            params: store.params().map(|(k, _)| k.clone()).collect(),
            buffers: store.buffers().map(|(k, _)| k.clone()).collect(),
        },
    )
}

/// Loads every parameter and buffer that `store` declares from `dir`.
pub fn load_store<T: Scalar>(dir: &Path, store: &mut ParamStore<T>) -> Result<StoreMeta> {
    let meta: StoreMeta = read_meta(&dir.join("meta.json"))?;
    let mut loaded = ParamStore::new(store.namespace());
    for (sub, names, is_param) in [
        ("params", store.params().map(|(k, _)| k.clone()).collect::<Vec<_>>(), true),
        ("buffers", store.buffers().map(|(k, _)| k.clone()).collect(), false),
    ] {
        for name in names {
            let path = dir.join(sub).join(format!("{name}.npy"));
            if !path.exists() {
                return Err(Error::MissingParameter(store.full_name(&name)));
            }
            let t: Tensor<T> = npy::read(&path)?;
            if is_param {
                loaded.insert_param(name, t);
            } else {
                loaded.insert_buffer(name, t);
            }
        }
    }
    store.copy_from(&loaded).map_err(|e| match e {
        Error::ShapeMismatch { name, expected, found } => Error::ShapeMismatch {
            name: store.full_name(&name),
            expected,
            found,
        },
        other => other,
    })?;
    Ok(meta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimMeta {
    format_version: u32,
    step: u64,
    names: Vec<String>,
}

fn moment_file(dir: &Path, which: &str, name: &str) -> PathBuf {
    dir.join(which).join(format!("{}.npy", name.replace('/', "__")))
}

pub fn save_optimizer<T: Scalar>(dir: &Path, opt: &Adam<T>) -> Result<()> {
    let (first, second) = opt.moments();
    for (which, map) in [("first", first), ("second", second)] {
        mkdir(&dir.join(which))?;
        for (name, t) in map {
            npy::write(&moment_file(dir, which, name), t)?;
        }
    }
    write_json(
        &dir.join("meta.json"),
        &OptimMeta {
            format_version: FORMAT_VERSION,
            step: opt.steps_taken(),
            names: first.keys().cloned().collect(),
        },
    )
}

pub fn load_optimizer<T: Scalar>(dir: &Path, cfg: AdamConfig) -> Result<Adam<T>> {
    let meta: OptimMeta = read_meta(&dir.join("meta.json"))?;
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for name in &meta.names {
        for (which, map) in [("first", &mut first), ("second", &mut second)] {
            let path = moment_file(dir, which, name);
            if !path.exists() {
                return Err(Error::MissingParameter(format!("optimizer {which} moment of {name}")));
            }
            map.insert(name.clone(), npy::read(&path)?);
        }
    }
    Ok(Adam::restore(cfg, meta.step, first, second))
}

/// Replaces `dest` with the directory produced by `fill`, via a temporary
/// sibling and a rename.
pub fn write_dir_atomic(dest: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = crate::data::slide::tmp_sibling(dest);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    mkdir(&tmp)?;
    fill(&tmp)?;
    if dest.exists() {
        fs::remove_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    }
    fs::rename(&tmp, dest).map_err(|e| Error::io(dest, e))
}

/// SHA-256 of a value's canonical JSON.
pub fn json_hash(value: &Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Leaf-level differences between two JSON documents, as `path: old -> new`.
pub fn json_diff(old: &Value, new: &Value) -> Vec<String> {
    let (a, b) = (flatten(old), flatten(new));
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            let show = |v: Option<&Value>| v.map_or("<absent>".to_string(), Value::to_string);
            format!("{k}: {} -> {}", show(a.get(k)), show(b.get(k)))
        })
        .collect()
}

pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&p, child, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", v, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{DualBranchEncoder, EncoderConfig};

    fn enc(width: usize, seed: u64) -> DualBranchEncoder<f32> {
        DualBranchEncoder::init(
            EncoderConfig {
                base_width: width,
                ..EncoderConfig::default()
            },
            seed,
        )
    }

    #[test]
    fn store_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let src = enc(4, 1);
        save_store(dir.path(), &src.context, "context", src.net.cfg.stage_widths(), 1).unwrap();
        let mut dst = enc(4, 2);
        load_store(dir.path(), &mut dst.context).unwrap();
        assert_eq!(dst.context, src.context);
        assert_eq!(dst.context.checksum(), src.context.checksum());
    }

    #[test]
    fn missing_array_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let src = enc(4, 1);
        save_store(dir.path(), &src.context, "context", src.net.cfg.stage_widths(), 1).unwrap();
        fs::remove_file(dir.path().join("params/layer2.0.conv1.weight.npy")).unwrap();
        let mut dst = enc(4, 1);
        match load_store(dir.path(), &mut dst.context) {
            Err(Error::MissingParameter(name)) => assert_eq!(name, "encoder.context/layer2.0.conv1.weight"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_topology_names_shape() {
        let dir = tempfile::tempdir().unwrap();
        let src = enc(4, 1);
        save_store(dir.path(), &src.context, "context", src.net.cfg.stage_widths(), 1).unwrap();
        let mut dst = enc(8, 1);
        assert!(matches!(load_store(dir.path(), &mut dst.context), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn corrupt_metadata_is_a_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = enc(4, 1);
        save_store(dir.path(), &src.context, "context", src.net.cfg.stage_widths(), 1).unwrap();
        fs::write(dir.path().join("meta.json"), "{not json").unwrap();
        let mut dst = enc(4, 1);
        assert!(matches!(load_store(dir.path(), &mut dst.context), Err(Error::Version(_))));
        fs::write(dir.path().join("meta.json"), r#"{"format_version": 99}"#).unwrap();
        assert!(matches!(load_store(dir.path(), &mut dst.context), Err(Error::Version(_))));
    }

    #[test]
    fn diff_lists_changed_leaves() {
        let a = serde_json::json!({"lr": 0.001, "nested": {"x": 1, "y": [1, 2]}});
        let b = serde_json::json!({"lr": 0.002, "nested": {"x": 1, "y": [1, 3]}, "z": true});
        assert_eq!(
            json_diff(&a, &b),
            vec!["lr: 0.001 -> 0.002", "nested.y: [1,2] -> [1,3]", "z: <absent> -> true"]
        );
        assert!(json_diff(&a, &a).is_empty());
        assert_ne!(json_hash(&a), json_hash(&b));
    }
}
