use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dsfwsi_core::checkpoint::write_json;
use dsfwsi_core::config::{write_snapshot, ExperimentConfig};
use dsfwsi_core::data::slide::{read_gray, write_atomic};
use dsfwsi_core::data::store::MANIFEST;
use dsfwsi_core::data::{generate_synthetic_dataset, load_groups, read_manifest, split_folds, tile_dataset, ContextGroup};
use dsfwsi_core::eval::{confusion_counts, write_report, ConfusionCounts, Metrics, StdKind};
use dsfwsi_core::hooknet::{run_finetune, write_predictions, Init, PredictionEntry};
use dsfwsi_core::pretrain::run_pretraining;
use dsfwsi_core::{Error, Real, Result};

#[derive(Parser)]
#[command(name = "dsfwsi", version, about = "Dual-branch self-supervised pretraining and hooked segmentation for WSIs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Masking only: the permutation is the identity.
    Mask,
    /// Jigsaw only: no slot is masked.
    Jigsaw,
    /// Last stage only.
    Dsl,
    /// No fusion stream.
    Ctfm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StdArg {
    Sample,
    Population,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic slides, then tile them into patches and a manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_size: Option<u32>,
    },
    /// Tile the slides listed in a slides.json.
    Tile {
        #[arg(long)]
        slides: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Self-supervised pretraining of both encoders.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
        /// Pretrain on every group instead of the training folds.
        #[arg(long)]
        all_patches: bool,
        #[arg(long)]
        fold: Option<usize>,
        /// Replace augmentation by normalisation only.
        #[arg(long)]
        no_aug: bool,
    },
    /// Supervised fine-tuning of the segmenter on one fold.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        /// `random`, a pretraining checkpoint directory, or `external:<dir>`.
        #[arg(long, default_value = "random")]
        init: String,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a prediction dump against the manifest labels.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Aggregate metrics.json of several runs into mean and std.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sample")]
        std: StdArg,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn dataset_root(manifest: &Path) -> &Path {
    manifest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn owned(groups: Vec<&ContextGroup>) -> Vec<ContextGroup> {
    groups.into_iter().cloned().collect()
}

fn split(cfg: &ExperimentConfig, groups: &[ContextGroup], fold: usize) -> Result<(Vec<ContextGroup>, Vec<ContextGroup>)> {
    if fold >= cfg.folds.k {
        return Err(Error::ConfigKeys {
            keys: vec!["folds.fold".into()],
            details: vec![format!("folds.fold: {fold} outside 0..{}", cfg.folds.k)],
        });
    }
    let spec = split_folds(groups, cfg.folds.k, cfg.seed)?;
    Ok((owned(spec.training(groups, fold)), owned(spec.validation(groups, fold))))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { config, out, seed, output_size } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(s) = output_size {
                cfg.tiling.output_size = s;
            }
            let index = generate_synthetic_dataset(&cfg.synth, &out)?;
            let groups = tile_dataset(&out.join("slides.json"), &cfg.tiling, &out)?;
            write_snapshot(&out, &cfg, json!({"command": "synth", "slides": index.slides.len(), "groups": groups.len()}))?;
            println!("{}", json!({"slides": index.slides.len(), "groups": groups.len(), "manifest": out.join(MANIFEST)}));
        }
        Command::Tile { slides, out, config } => {
            let cfg = load_config(config.as_deref(), None)?;
            let groups = tile_dataset(&slides, &cfg.tiling, &out)?;
            write_snapshot(&out, &cfg, json!({"command": "tile", "slides": slides, "groups": groups.len()}))?;
            println!("{}", json!({"groups": groups.len(), "manifest": out.join(MANIFEST)}));
        }
        Command::Pretrain {
            manifest,
            out,
            config,
            seed,
            ablate,
            resume,
            all_patches,
            fold,
            no_aug,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            for a in &ablate {
                match a {
                    Ablation::Mask => cfg.pretrain.mask_only = true,
                    Ablation::Jigsaw => cfg.pretrain.jigsaw_only = true,
                    Ablation::Dsl => cfg.pretrain.dsl_enabled = false,
                    Ablation::Ctfm => cfg.pretrain.ctfm_enabled = false,
                }
            }
            if no_aug {
                cfg.pretrain.augment = dsfwsi_core::augment::AugmentConfig::identity();
            }
            cfg.validate()?;
            let fold = fold.unwrap_or(cfg.folds.fold);
            let groups = read_manifest(&manifest)?;
            let chosen = if all_patches { groups } else { split(&cfg, &groups, fold)?.0 };
            let data = load_groups(dataset_root(&manifest), &chosen)?;
            write_snapshot(
                &out,
                &cfg,
                json!({"command": "pretrain", "manifest": manifest, "groups": data.len(), "fold": (!all_patches).then_some(fold),
                       "ablate": ablate.iter().map(|a| format!("{a:?}").to_lowercase()).collect::<Vec<_>>(), "resume": resume}),
            )?;
            let ckpt = out.join("checkpoint");
            let res = run_pretraining::<Real>(&data, &cfg.pretrain, Some(&out), resume.then_some(ckpt.as_path()))?;
            let last = res.log.last();
            println!("{}", json!({"epochs": res.state.epoch, "groups": data.len(), "final_loss": last.map(|e| e.l), "checkpoint": ckpt}));
        }
        Command::Finetune {
            manifest,
            init,
            fraction,
            fold,
            out,
            config,
            seed,
        } => {
            let mut cfg = load_config(config.as_deref(), seed)?;
            if let Some(f) = fraction {
                cfg.finetune.fraction = f;
            }
            cfg.validate()?;
            let fold = fold.unwrap_or(cfg.folds.fold);
            let init_mode = match init.as_str() {
                "random" => Init::Random,
                s => match s.strip_prefix("external:") {
                    Some(d) => Init::External(d.into()),
                    None => Init::Pretrained(s.into()),
                },
            };
            let groups = read_manifest(&manifest)?;
            let (train, val) = split(&cfg, &groups, fold)?;
            let root = dataset_root(&manifest);
            let (train, val) = (load_groups(root, &train)?, load_groups(root, &val)?);
            write_snapshot(&out, &cfg, json!({"command": "finetune", "manifest": manifest, "init": init, "fold": fold}))?;
            let res = run_finetune::<Real>(&train, &val, &cfg.finetune, &init_mode)?;
            let mut best = res.best.clone();
            best.fold = Some(fold);
            let summary = json!({
                "fold": fold,
                "fraction": cfg.finetune.fraction,
                "init": init,
                "seed": cfg.seed,
                "train_groups": res.train_groups,
                "train_samples": res.train_samples,
                "validation_groups": val.len(),
                "best_epoch": res.best_epoch,
                "metrics": best,
                "history": res.history,
            });
            write_json(&out.join("metrics.json"), &summary)?;
            let mut model = res.model;
            model.save(&out.join("model"), &cfg.finetune)?;
            write_predictions(&mut model, &val, cfg.finetune.batch_size, &out.join("predictions"))?;
            println!("{}", json!({"fold": fold, "fraction": cfg.finetune.fraction, "mean_f1": best.mean_f1, "accuracy": best.accuracy}));
        }
        Command::Evaluate {
            manifest,
            predictions,
            out,
            config,
            fold,
        } => {
            let cfg = load_config(config.as_deref(), None)?;
            let classes = cfg.finetune.classes;
            let groups = read_manifest(&manifest)?;
            let labels: HashMap<&str, &str> = groups
                .iter()
                .flat_map(ContextGroup::patches)
                .filter_map(|p| p.label_path.as_deref().map(|l| (p.patch_id.as_str(), l)))
                .collect();
            let index_path = predictions.join("index.json");
            let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            let index: Vec<PredictionEntry> = serde_json::from_str(&text)?;
            let mut counts = ConfusionCounts::new(classes);
            for entry in &index {
                let label = labels
                    .get(entry.patch_id.as_str())
                    .ok_or_else(|| Error::Validation(format!("no label for predicted patch {}", entry.patch_id)))?;
                let l = read_gray(&dataset_root(&manifest).join(label))?;
                let p = read_gray(&predictions.join(&entry.path))?;
                if l.dimensions() != p.dimensions() {
                    return Err(Error::Precondition(format!(
                        "{}: prediction {:?} vs label {:?}",
                        entry.patch_id,
                        p.dimensions(),
                        l.dimensions()
                    )));
                }
                let to_u32 = |raw: &[u8]| raw.iter().map(|&v| v as u32).collect::<Vec<_>>();
                counts.merge(&confusion_counts(&to_u32(p.as_raw()), &to_u32(l.as_raw()), classes, cfg.finetune.ignore_index)?)?;
            }
            let metrics = Metrics::from_counts(&counts, fold)?;
            write_snapshot(&out, &cfg, json!({"command": "evaluate", "manifest": manifest, "predictions": predictions}))?;
            write_json(&out.join("metrics.json"), &json!({"fold": fold, "patches": index.len(), "metrics": metrics, "counts": counts}))?;
            write_report(&out, std::slice::from_ref(&metrics), StdKind::Sample)?;
            println!("{}", json!({"mean_f1": metrics.mean_f1, "accuracy": metrics.accuracy, "patches": index.len()}));
        }
        Command::Report { runs, out, std } => {
            let mut metrics = Vec::with_capacity(runs.len());
            for (i, dir) in runs.iter().enumerate() {
                let path = dir.join("metrics.json");
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let v: Value = serde_json::from_str(&text)?;
                let mut m: Metrics = serde_json::from_value(v.get("metrics").cloned().unwrap_or(v))?;
                m.fold = m.fold.or(Some(i));
                metrics.push(m);
            }
            let kind = match std {
                StdArg::Sample => StdKind::Sample,
                StdArg::Population => StdKind::Population,
            };
            let summaries = write_report(&out, &metrics, kind)?;
            write_atomic(
                &out.join("runs.json"),
                &serde_json::to_vec_pretty(&json!({"runs": runs, "std": format!("{std:?}").to_lowercase()}))?,
            )?;
            println!("{}", serde_json::to_string(&summaries[0])?);
        }
    }
    Ok(())
}

fn error_line(e: &Error) -> String {
    let mut doc = json!({"error": e.kind(), "message": e.to_string()});
    if let Error::ConfigKeys { keys, details } = e {
        doc["keys"] = json!(keys);
        doc["details"] = json!(details);
    }
    doc.to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(if e.kind() == "config" { 3 } else { 1 })
        }
    }
}
