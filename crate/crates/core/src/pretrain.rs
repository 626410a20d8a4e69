//! Self-supervised pretraining: views, encoders, fusion and dense SimSiam
//! heads wired into one optimisation loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{make_view_pair, AugmentConfig};
use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, read_meta, write_dir_atomic, write_json, FORMAT_VERSION};
use crate::ctfm::{fuse_batch, sample_fusion_plan_with, FusionMode, FusionPlan};
use crate::data::tiling::GroupPixels;
use crate::dsl::{dsl_branch_loss, stage_loss_graph, total_loss, DslHeadBank, HeadLayout, StageWeights, Stream};
use crate::encoder::{global_pool, Branch, DualBranchEncoder, EncoderConfig, STAGES};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::seeding::{self, Key};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Context groups per step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub mask_ratio: f64,
    pub share_plan_across_views: bool,
    /// Targets drawn per group each step; `None` keeps all `m`.
    pub targets_per_group: Option<usize>,
    pub stage_weights: StageWeights,
    pub dsl_enabled: bool,
    pub ctfm_enabled: bool,
    pub jigsaw_only: bool,
    pub mask_only: bool,
    /// Bypass projectors and predictors (debugging aid).
    pub identity_heads: bool,
    /// Also write `checkpoints/epoch_NNNN` every this many epochs; 0 = final only.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 500,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            seed: 0,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            mask_ratio: 0.5,
            share_plan_across_views: false,
            targets_per_group: None,
            stage_weights: StageWeights::default(),
            dsl_enabled: true,
            ctfm_enabled: true,
            jigsaw_only: false,
            mask_only: false,
            identity_heads: false,
            checkpoint_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push(("batch_size", "must be positive".to_string()));
        }
        if !(self.optimizer.lr > 0.0) {
            bad.push(("optimizer.lr", "must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            bad.push(("mask_ratio", format!("{} outside [0, 1]", self.mask_ratio)));
        }
        if self.jigsaw_only && self.mask_only {
            bad.push(("jigsaw_only", "jigsaw_only and mask_only are exclusive".to_string()));
        }
        if self.targets_per_group == Some(0) {
            bad.push(("targets_per_group", "must be positive".to_string()));
        }
        if self.encoder.base_width == 0 {
            bad.push(("encoder.base_width", "must be positive".to_string()));
        }
        if let Err(e) = self.augment.validate() {
            bad.push(("augment", e.to_string()));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigKeys {
                keys: bad.iter().map(|(k, _)| format!("pretrain.{k}")).collect(),
                details: bad.into_iter().map(|(k, m)| format!("pretrain.{k}: {m}")).collect(),
            })
        }
    }

    pub fn fusion_mode(&self) -> FusionMode {
        match (self.jigsaw_only, self.mask_only) {
            (true, _) => FusionMode::JigsawOnly,
            (_, true) => FusionMode::MaskOnly,
            _ => FusionMode::Full,
        }
    }

    pub fn layout(&self, m: usize) -> HeadLayout {
        HeadLayout {
            stage_widths: self.encoder.stage_widths(),
            m: self.targets_per_group.map_or(m, |k| k.min(m)),
            fusion: self.ctfm_enabled,
            dense: self.dsl_enabled,
        }
    }

    /// Hash over everything that shapes the trajectory; run length
    /// (`epochs`, `checkpoint_every`) is excluded so a run can be extended.
    pub fn trajectory_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Value::Object(map) = &mut v {
            map.remove("epochs");
            map.remove("checkpoint_every");
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    /// One-based stage number.
    pub stage: usize,
    pub stream: Stream,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<StageLoss>,
    pub context: f64,
    pub target: f64,
    pub fusion: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, stage: usize, stream: Stream) -> Option<f64> {
        self.terms
            .iter()
            .find(|t| t.stage == stage && t.stream == stream)
            .map(|t| t.value)
    }

    fn from_terms(terms: Vec<StageLoss>, weights: &StageWeights, fusion: bool) -> Result<Self> {
        let branch = |stream: Stream| -> Result<f64> {
            let (losses, w): (Vec<f64>, Vec<f64>) = terms
                .iter()
                .filter(|t| t.stream == stream)
                .map(|t| (t.value, weights.0[t.stage - 1]))
                .unzip();
            dsl_branch_loss(&losses, &w)
        };
        let context = branch(Stream::Context)?;
        let target = branch(Stream::Target)?;
        let fusion = if fusion { Some(branch(Stream::Fusion)?) } else { None };
        Ok(LossReport {
            total: total_loss(context, target, fusion),
            terms,
            context,
            target,
            fusion,
        })
    }
}

/// Everything the optimiser touches.
#[derive(Clone, Debug)]
pub struct PretrainState<T> {
    pub encoder: DualBranchEncoder<T>,
    pub heads: DslHeadBank<T>,
    pub optimizer: Adam<T>,
    /// Epochs completed.
    pub epoch: usize,
}

impl<T: Scalar> PretrainState<T> {
    pub fn init(cfg: &PretrainConfig, m: usize) -> Self {
        let encoder = DualBranchEncoder::init(cfg.encoder, seeding::derive(cfg.seed, &["encoder".into()]));
        let mut heads = DslHeadBank::init(cfg.layout(m), cfg.encoder.norm(), seeding::derive(cfg.seed, &["heads".into()]));
        heads.bypass = cfg.identity_heads;
        PretrainState {
            encoder,
            heads,
            optimizer: Adam::new(cfg.optimizer),
            epoch: 0,
        }
    }
}

/// Augmented views and fusion plans of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedBatch {
    /// Per view: `[b, 3, s, s]`.
    pub context: [Tensor<f32>; 2],
    /// Per view: `[b * m, 3, s, s]`, group-major.
    pub targets: [Tensor<f32>; 2],
    pub plans: [Vec<FusionPlan>; 2],
    pub groups: usize,
    pub m: usize,
}

fn stack(views: Vec<Tensor<f32>>) -> Result<Tensor<f32>> {
    let first = views
        .first()
        .ok_or_else(|| Error::Precondition("empty batch".into()))?;
    let mut shape = vec![views.len()];
    shape.extend_from_slice(first.shape());
    let data = views.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

/// Loader concurrency from `DSFWSI_NUM_WORKERS` (unset or 0: in-thread).
pub fn num_workers() -> Result<usize> {
    match std::env::var("DSFWSI_NUM_WORKERS") {
        Err(_) => Ok(0),
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("DSFWSI_NUM_WORKERS = `{s}` is not a non-negative integer"))),
    }
}

fn map_workers<I: Sync, O: Send>(items: &[I], workers: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if workers <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<O>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("loader thread panicked")?);
        }
        Ok(out)
    })
}

/// Draws views and plans for `groups` at `epoch`. Every random choice is
/// keyed by (seed, epoch, group id), so batches do not depend on order,
/// worker count or earlier epochs.
pub fn prepare_batch(groups: &[&GroupPixels], cfg: &PretrainConfig, epoch: usize, workers: usize) -> Result<PreparedBatch> {
    let m_all = groups
        .first()
        .ok_or_else(|| Error::Precondition("empty batch".into()))?
        .targets
        .len();
    if groups.iter().any(|g| g.targets.len() != m_all) {
        return Err(Error::Precondition("groups in one batch differ in m".into()));
    }
    let m = cfg.targets_per_group.map_or(m_all, |k| k.min(m_all));
    let seed = cfg.seed;
    let per_group = map_workers(groups, workers, |g| {
        let gid = g.group.group_id.as_str();
        let key = |tag: &'static str| -> Vec<Key<'_>> { vec![tag.into(), epoch.into(), Key::Tag(gid)] };
        let mut slots: Vec<usize> = if m < m_all {
            index::sample(&mut seeding::rng(seed, &key("slots")), m_all, m).into_vec()
        } else {
            (0..m_all).collect()
        };
        slots.sort_unstable();
        let size = g.context.image.width();
        let pair = |img: &image::RgbImage, pid: &str, slot: u64| {
            let mut path = key("aug");
            path.push(slot.into());
            make_view_pair(img, pid, size, &cfg.augment, seeding::derive(seed, &path))
        };
        let ctx = pair(&g.context.image, &g.group.context.patch_id, 0)?;
        let tgts = slots
            .iter()
            .map(|&s| pair(&g.targets[s].image, &g.group.targets[s].patch_id, s as u64 + 1))
            .collect::<Result<Vec<_>>>()?;
        let mut plans = Vec::with_capacity(2);
        for view in 0..2u64 {
            let mut path = key("plan");
            path.push(view.into());
            plans.push(sample_fusion_plan_with(m, cfg.mask_ratio, cfg.fusion_mode(), &mut seeding::rng(seed, &path))?);
        }
        if cfg.share_plan_across_views {
            plans[1] = plans[0].clone();
        }
        Ok((ctx, tgts, plans))
    })?;
    let mut context = [Vec::new(), Vec::new()];
    let mut targets = [Vec::new(), Vec::new()];
    let mut plans = [Vec::new(), Vec::new()];
    for (ctx, tgts, mut p) in per_group {
        context[0].push(ctx.view1);
        context[1].push(ctx.view2);
        for t in tgts {
            targets[0].push(t.view1);
            targets[1].push(t.view2);
        }
        plans[1].push(p.pop().expect("two plans"));
        plans[0].push(p.pop().expect("two plans"));
    }
    let [c0, c1] = context;
    let [t0, t1] = targets;
    Ok(PreparedBatch {
        context: [stack(c0)?, stack(c1)?],
        targets: [stack(t0)?, stack(t1)?],
        plans,
        groups: groups.len(),
        m,
    })
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    /// Gradient norm per qualified parameter name.
    pub grad_norms: BTreeMap<String, f64>,
}

/// Builds the three-stream dense SimSiam loss on `g`; returns the weighted
/// total and the per-(stage, stream) terms.
pub fn build_loss<T: Scalar>(
    g: &mut Graph<T>,
    state: &mut PretrainState<T>,
    batch: &PreparedBatch,
    weights: &StageWeights,
    mode: Mode,
) -> Result<(Var, Vec<(usize, Stream, Var)>)> {
    let mut pooled: Vec<[[Var; STAGES]; 2]> = Vec::with_capacity(2);
    for v in 0..2 {
        let x = g.constant(batch.context[v].cast());
        let cf = state.encoder.forward_stages(g, Branch::Context, x, mode)?;
        let y = g.constant(batch.targets[v].cast());
        let tf = state.encoder.forward_stages(g, Branch::Target, y, mode)?;
        let c: [Var; STAGES] = std::array::from_fn(|i| global_pool(g, cf.stages[i]));
        let t: [Var; STAGES] = std::array::from_fn(|i| global_pool(g, tf.stages[i]));
        pooled.push([c, t]);
    }
    let layout = state.heads.layout;
    let mut terms = Vec::new();
    for stage in layout.stages() {
        for stream in layout.streams() {
            let mut zp = Vec::with_capacity(2);
            for (v, views) in pooled.iter().enumerate() {
                let input = match stream {
                    Stream::Context => views[0][stage],
                    Stream::Target => views[1][stage],
                    Stream::Fusion => fuse_batch(g, views[0][stage], views[1][stage], &batch.plans[v])?,
                };
                let z = state.heads.project(g, input, stage, stream, mode)?;
                let p = state.heads.predict(g, z, stage, stream, mode)?;
                zp.push((z, p));
            }
            let l = stage_loss_graph(g, zp[0].1, zp[1].0, zp[1].1, zp[0].0);
            terms.push((stage, stream, l));
        }
    }
    let vars: Vec<Var> = terms.iter().map(|t| t.2).collect();
    let w: Vec<T> = terms.iter().map(|t| T::c(weights.0[t.0])).collect();
    Ok((g.weighted_sum(&vars, &w), terms))
}

/// One optimiser update on a prepared batch.
pub fn pretrain_step<T: Scalar>(state: &mut PretrainState<T>, batch: &PreparedBatch, weights: &StageWeights) -> Result<StepOutcome> {
    let mut g = Graph::new();
    let (total, terms) = build_loss(&mut g, state, batch, weights, Mode::Train)?;
    let mut values = Vec::with_capacity(terms.len());
    for &(stage, stream, v) in &terms {
        let value = g.value(v).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NanLoss {
                stream: stream.name().into(),
                stage: stage + 1,
            });
        }
        values.push(StageLoss {
            stage: stage + 1,
            stream,
            value,
        });
    }
    let report = LossReport::from_terms(values, weights, state.heads.layout.fusion)?;
    let grads = g.backward(total);
    let grad_norms = grads.names().map(|n| (n.clone(), grads.norm(n))).collect();
    let PretrainState {
        encoder,
        heads,
        optimizer,
        ..
    } = state;
    optimizer.step(&mut [&mut encoder.context, &mut encoder.target, &mut heads.store], &grads);
    Ok(StepOutcome { report, grad_norms })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: f64,
    pub l_t: f64,
    pub l_fu: f64,
    pub l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub l_c: f64,
    pub l_t: f64,
    pub l_fu: f64,
    pub l: f64,
}

impl StepLog {
    fn new(epoch: usize, step: usize, r: &LossReport) -> Self {
        StepLog {
            epoch,
            step,
            l_c: r.context,
            l_t: r.target,
            l_fu: r.fusion.unwrap_or(0.0),
            l: r.total,
        }
    }
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "L_c", "L_t", "L_fu", "L"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.l_c.to_string(), e.l_t.to_string(), e.l_fu.to_string(), e.l.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    crate::data::slide::write_atomic(path, &bytes)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let num = |j: usize| -> Result<f64> {
            row.get(j).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Parse {
                file: path.display().to_string(),
                line: i + 2,
                field: ["epoch", "L_c", "L_t", "L_fu", "L"][j].into(),
                message: "not a number".into(),
            })
        };
        out.push(EpochLog {
            epoch: num(0)? as usize,
            l_c: num(1)?,
            l_t: num(2)?,
            l_fu: num(3)?,
            l: num(4)?,
        });
    }
    Ok(out)
}

fn write_step_log(path: &Path, steps: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "step", "L_c", "L_t", "L_fu", "L"])?;
    for s in steps {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            s.l_c.to_string(),
            s.l_t.to_string(),
            s.l_fu.to_string(),
            s.l.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    crate::data::slide::write_atomic(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunMeta {
    format_version: u32,
    epoch: usize,
    seed: u64,
    config_hash: String,
    m: usize,
    dtype: String,
}

pub fn save_checkpoint<T: Scalar>(dir: &Path, state: &PretrainState<T>, cfg: &PretrainConfig, log: &[EpochLog]) -> Result<()> {
    write_dir_atomic(dir, |tmp| {
        let widths = cfg.encoder.stage_widths();
        checkpoint::save_store(&tmp.join("context"), &state.encoder.context, "context", widths, state.encoder.seed)?;
        checkpoint::save_store(&tmp.join("target"), &state.encoder.target, "target", widths, state.encoder.seed)?;
        checkpoint::save_store(&tmp.join("heads"), &state.heads.store, "heads", widths, cfg.seed)?;
        checkpoint::save_optimizer(&tmp.join("optimizer"), &state.optimizer)?;
        write_json(&tmp.join("config.json"), cfg)?;
        write_json(
            &tmp.join("meta.json"),
            &RunMeta {
                format_version: FORMAT_VERSION,
                epoch: state.epoch,
                seed: cfg.seed,
                config_hash: checkpoint::json_hash(&cfg.trajectory_json()),
                m: state.heads.layout.m,
                dtype: T::NPY_DESCR.into(),
            },
        )?;
        write_loss_log(&tmp.join("loss_log.csv"), log)
    })
}

/// Restores a pretraining state. The stored configuration must describe the
/// same trajectory as `cfg`; otherwise the differing keys are reported.
pub fn load_checkpoint<T: Scalar>(dir: &Path, cfg: &PretrainConfig, m: usize) -> Result<(PretrainState<T>, Vec<EpochLog>)> {
    let meta: RunMeta = read_meta(&dir.join("meta.json"))?;
    if meta.config_hash != checkpoint::json_hash(&cfg.trajectory_json()) {
        let stored: PretrainConfig = serde_json::from_str(
            &fs::read_to_string(dir.join("config.json")).map_err(|e| Error::io(dir.join("config.json"), e))?,
        )?;
        return Err(Error::ConfigMismatch {
            diff: checkpoint::json_diff(&stored.trajectory_json(), &cfg.trajectory_json()),
        });
    }
    let mut state = PretrainState::<T>::init(cfg, m);
    checkpoint::load_store(&dir.join("context"), &mut state.encoder.context)?;
    checkpoint::load_store(&dir.join("target"), &mut state.encoder.target)?;
    checkpoint::load_store(&dir.join("heads"), &mut state.heads.store)?;
    state.optimizer = checkpoint::load_optimizer(&dir.join("optimizer"), cfg.optimizer)?;
    state.epoch = meta.epoch;
    let log = read_loss_log(&dir.join("loss_log.csv"))?;
    Ok((state, log))
}

/// Batches of group indices for `epoch`: a seeded shuffle cut into
/// `batch_size` chunks, with a trailing singleton merged into the previous
/// chunk (batch statistics need two samples).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng(seed, &["order".into(), epoch.into()]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub state: PretrainState<T>,
    pub log: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

/// Trains for `cfg.epochs` epochs (continuing from `resume` if given) and,
/// when `out` is set, writes `loss_log.csv`, `steps.csv` and
/// `checkpoint/` there.
pub fn run_pretraining<T: Scalar>(
    data: &[GroupPixels],
    cfg: &PretrainConfig,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<PretrainOutcome<T>> {
    cfg.validate()?;
    let m = data
        .first()
        .ok_or_else(|| Error::Precondition("pretraining needs at least one group".into()))?
        .targets
        .len();
    if m == 0 {
        return Err(Error::Precondition("groups carry no target patches".into()));
    }
    let (mut state, mut log) = match resume {
        Some(dir) => load_checkpoint::<T>(dir, cfg, m)?,
        None => (PretrainState::init(cfg, m), Vec::new()),
    };
    let workers = num_workers()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut steps = Vec::new();
    for epoch in state.epoch..cfg.epochs {
        let mut sums = [0.0f64; 4];
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for (step, idx) in batches.iter().enumerate() {
            let groups: Vec<&GroupPixels> = idx.iter().map(|&i| &data[i]).collect();
            let batch = prepare_batch(&groups, cfg, epoch, workers)?;
            let outcome = pretrain_step(&mut state, &batch, &cfg.stage_weights)?;
            let s = StepLog::new(epoch, step, &outcome.report);
            for (acc, v) in sums.iter_mut().zip([s.l_c, s.l_t, s.l_fu, s.l]) {
                *acc += v;
            }
            steps.push(s);
        }
        let n = batches.len() as f64;
        let entry = EpochLog {
            epoch,
            l_c: sums[0] / n,
            l_t: sums[1] / n,
            l_fu: sums[2] / n,
            l: sums[3] / n,
        };
        log::info!("epoch {epoch}: L = {:.5} (L_c {:.5}, L_t {:.5}, L_fu {:.5})", entry.l, entry.l_c, entry.l_t, entry.l_fu);
        log.push(entry);
        state.epoch = epoch + 1;
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join("checkpoints").join(format!("epoch_{:04}", state.epoch)), &state, cfg, &log)?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("checkpoint"), &state, cfg, &log)?;
        write_loss_log(&dir.join("loss_log.csv"), &log)?;
        write_step_log(&dir.join("steps.csv"), &steps)?;
    }
    Ok(PretrainOutcome { state, log, steps })
}
