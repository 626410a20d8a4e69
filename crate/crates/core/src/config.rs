//! Experiment configuration: one JSON document for every subcommand.
//!
//! Keys are checked against the full default document before
//! deserialisation so that every unknown key is reported at once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::synth::SynthConfig;
use crate::data::tiling::TilingConfig;
use crate::error::{Error, Result};
use crate::hooknet::FinetuneConfig;
use crate::pretrain::PretrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoldsConfig {
    pub k: usize,
    pub fold: usize,
}

impl Default for FoldsConfig {
    fn default() -> Self {
        FoldsConfig { k: 5, fold: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; copied into every section that has its own seed.
    pub seed: u64,
    pub synth: SynthConfig,
    pub tiling: TilingConfig,
    pub folds: FoldsConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

const SECTION_SEEDS: [&str; 3] = ["synth", "pretrain", "finetune"];

/// Dotted paths present in `value` but absent from `reference`. A `null`
/// reference (an unset optional) accepts any subtree.
pub fn unknown_keys(value: &Value, reference: &Value) -> Vec<String> {
    fn walk(v: &Value, r: &Value, prefix: &str, out: &mut Vec<String>) {
        if let (Value::Object(vm), Value::Object(rm)) = (v, r) {
            for (k, sub) in vm {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match rm.get(k) {
                    None => out.push(path),
                    Some(Value::Null) => {}
                    Some(rs) => walk(sub, rs, &path, out),
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(value, reference, "", &mut out);
    out
}

fn remove_path(value: &mut Value, path: &str) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = value;
    for p in parts {
        match cur.get_mut(p) {
            Some(next) => cur = next,
            None => return,
        }
    }
    if let Value::Object(map) = cur {
        map.remove(last);
    }
}

impl ExperimentConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        if !value.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let reference = serde_json::to_value(ExperimentConfig::default())?;
        let mut value = value;
        let unknown = unknown_keys(&value, &reference);
        for k in &unknown {
            remove_path(&mut value, k);
        }
        let mut keys = unknown.clone();
        let mut details: Vec<String> = unknown.iter().map(|k| format!("{k}: unknown key")).collect();
        // localise type errors to a section
        if let Value::Object(map) = &value {
            for (k, v) in map {
                let mut probe = reference.clone();
                probe[k] = v.clone();
                if let Err(e) = serde_json::from_value::<ExperimentConfig>(probe) {
                    keys.push(k.clone());
                    details.push(format!("{k}: {e}"));
                }
            }
        }
        if keys.len() > unknown.len() {
            return Err(Error::ConfigKeys { keys, details });
        }
        let root_seed = value.get("seed").and_then(Value::as_u64);
        for s in SECTION_SEEDS {
            let own = value.get(s).and_then(|v| v.get("seed")).and_then(Value::as_u64);
            if matches!((own, root_seed), (Some(a), Some(b)) if a != b) {
                keys.push(format!("{s}.seed"));
                details.push(format!("{s}.seed: differs from the root seed"));
            }
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(value.clone())?;
        if root_seed.is_none() {
            // a section seed alone sets the root
            if let Some(s) = SECTION_SEEDS
                .iter()
                .find_map(|s| value.get(*s).and_then(|v| v.get("seed")).and_then(Value::as_u64))
            {
                cfg.seed = s;
            }
        }
        cfg.set_seed(cfg.seed);
        if let Err(Error::ConfigKeys { keys: k, details: d }) = cfg.validate() {
            keys.extend(k);
            details.extend(d);
        }
        if keys.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::ConfigKeys { keys, details })
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(value)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let mut keys = Vec::new();
        let mut details = Vec::new();
        let mut absorb = |r: Result<()>, key: &str| match r {
            Ok(()) => {}
            Err(Error::ConfigKeys { keys: k, details: d }) => {
                keys.extend(k);
                details.extend(d);
            }
            Err(e) => {
                keys.push(key.to_string());
                details.push(format!("{key}: {e}"));
            }
        };
        absorb(self.pretrain.validate(), "pretrain");
        absorb(self.finetune.validate(), "finetune");
        absorb(self.synth.validate(), "synth");
        absorb(self.tiling.validate(self.synth.ratio), "tiling");
        if self.folds.k < 2 {
            absorb(Err(Error::Config("k must be at least 2".into())), "folds.k");
        }
        if self.folds.fold >= self.folds.k {
            absorb(
                Err(Error::Config(format!("fold {} outside 0..{}", self.folds.fold, self.folds.k))),
                "folds.fold",
            );
        }
        if keys.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigKeys { keys, details })
        }
    }
}

/// `resolved_config.json`: the effective configuration plus enough
/// provenance to rerun.
pub fn write_snapshot(dir: &Path, cfg: &ExperimentConfig, extra: Value) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let doc = serde_json::json!({
        "config": cfg,
        "code_version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "num_workers": std::env::var("DSFWSI_NUM_WORKERS").unwrap_or_else(|_| "0".into()),
        "run": extra,
    });
    crate::checkpoint::write_json(&dir.join("resolved_config.json"), &doc)
}
