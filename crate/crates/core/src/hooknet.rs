//! Two-branch encoder-decoder segmenter. The context decoder output at a
//! fixed depth is centre-cropped to the target bottleneck and concatenated
//! to it ("hooking"); only the target branch is supervised by default.

use std::path::Path;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::augment::{normalized, AugmentConfig};
use crate::autograd::{Graph, Var};
use crate::checkpoint;
use crate::data::folds::subsample_indices;
use crate::data::tiling::GroupPixels;
use crate::encoder::{Branch, DualBranchEncoder, EncoderConfig, StageFeatures, STAGES};
use crate::error::{Error, Result};
use crate::eval::{confusion_counts, ConfusionCounts, Metrics};
use crate::nn::{BatchNorm, Conv2d, Mode, NormConfig, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::pretrain::epoch_batches;
use crate::scalar::Scalar;
use crate::seeding;
use crate::tensor::Tensor;

pub const DECODER_DEPTHS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// (context, target) pairs per step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Share of training groups that keep their labels.
    pub fraction: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub classes: usize,
    /// Context decoder depth whose output is hooked into the target bottleneck.
    pub hook_depth: usize,
    pub hooking: bool,
    /// Weight of the target loss; the context loss gets `1 - lambda`.
    pub lambda: f64,
    pub ignore_index: Option<u32>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 50,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            fraction: 1.0,
            seed: 0,
            encoder: EncoderConfig::default(),
            classes: 3,
            hook_depth: 2,
            hooking: true,
            lambda: 1.0,
            ignore_index: None,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.batch_size == 0 {
            bad.push(("batch_size", "must be positive".to_string()));
        }
        if !(self.optimizer.lr > 0.0) {
            bad.push(("optimizer.lr", "must be positive".to_string()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            bad.push(("fraction", format!("{} outside (0, 1]", self.fraction)));
        }
        if self.classes < 2 {
            bad.push(("classes", "need at least two classes".to_string()));
        }
        if self.hook_depth > DECODER_DEPTHS {
            bad.push(("hook_depth", format!("{} exceeds decoder depth {DECODER_DEPTHS}", self.hook_depth)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            bad.push(("lambda", format!("{} outside [0, 1]", self.lambda)));
        }
        if self.encoder.base_width == 0 {
            bad.push(("encoder.base_width", "must be positive".to_string()));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigKeys {
                keys: bad.iter().map(|(k, _)| format!("finetune.{k}")).collect(),
                details: bad.into_iter().map(|(k, m)| format!("finetune.{k}: {m}")).collect(),
            })
        }
    }
}

/// Upsampling path: five x2 steps, skips from stage 3, 2, 1 and the stem,
/// widths mirroring the encoder, then a 1x1 class head.
#[derive(Clone, Debug, PartialEq)]
struct Decoder {
    blocks: Vec<(Conv2d, BatchNorm)>,
    head: Conv2d,
}

impl Decoder {
    fn new(prefix: &str, widths: [usize; STAGES], bottleneck: usize, classes: usize) -> Self {
        let [w1, w2, w3, _] = widths;
        let plan = [(bottleneck + w3, w3), (w3 + w2, w2), (w2 + w1, w1), (w1 + w1, w1), (w1, w1)];
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                (
                    Conv2d::new(format!("{prefix}.up{}.conv", i + 1), cin, cout, 3, 1, 1),
                    BatchNorm::new(format!("{prefix}.up{}.bn", i + 1), cout),
                )
            })
            .collect();
        Decoder {
            blocks,
            head: Conv2d::new(format!("{prefix}.head"), w1, classes, 1, 1, 0).with_bias(),
        }
    }

    fn init<T: Scalar, R: rand::Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for (c, b) in &self.blocks {
            c.init(store, rng);
            b.init(store);
        }
        self.head.init(store, rng);
    }

    fn out_channels(&self, depth: usize) -> usize {
        self.blocks[depth - 1].0.cout
    }

    #[allow(clippy::too_many_arguments)]
    fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        mut x: Var,
        feats: &StageFeatures,
        depths: std::ops::Range<usize>,
        mode: Mode,
        norm: NormConfig,
    ) -> Var {
        let skips = [Some(feats.stages[2]), Some(feats.stages[1]), Some(feats.stages[0]), Some(feats.stem), None];
        for i in depths {
            let up = g.upsample_nearest(x, 2);
            let h = match skips[i] {
                Some(s) => g.concat_dim1(&[up, s]),
                None => up,
            };
            let (conv, bn) = &self.blocks[i];
            let h = conv.forward(g, store, h);
            let h = bn.forward(g, store, h, mode, norm);
            x = g.relu(h);
        }
        x
    }
}

/// Centre crop offset of a `big` side onto a `small` side.
pub fn center_offset(big: usize, small: usize) -> usize {
    (big - small) / 2
}

/// Crops `context_map` to the bottleneck's spatial size around its centre
/// and appends it to `bottleneck` along channels. Returns the fused map and
/// the crop offset `(top, left)`.
pub fn hook_features<T: Scalar>(g: &mut Graph<T>, context_map: Var, bottleneck: Var) -> Result<(Var, (usize, usize))> {
    let (n, _, ch, cw) = g.value(context_map).dims4();
    let (nb, _, h, w) = g.value(bottleneck).dims4();
    if n != nb {
        return Err(Error::Precondition(format!("hooking batch {n} vs {nb}")));
    }
    if ch < h || cw < w {
        return Err(Error::Config(format!(
            "context map {ch}x{cw} is smaller than the target bottleneck {h}x{w}; lower hook_depth is too shallow"
        )));
    }
    let (top, left) = (center_offset(ch, h), center_offset(cw, w));
    let crop = g.crop2d(context_map, top, left, h, w);
    Ok((g.concat_dim1(&[bottleneck, crop]), (top, left)))
}

#[derive(Clone, Copy, Debug)]
pub struct SegOutput {
    pub target: Var,
    pub context: Option<Var>,
    pub hook_offset: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct HookNetModel<T> {
    pub encoder: DualBranchEncoder<T>,
    /// Both decoders and heads, prefixed `context.` / `target.`.
    pub decoders: ParamStore<T>,
    context_decoder: Decoder,
    target_decoder: Decoder,
    pub classes: usize,
    pub hook_depth: usize,
    pub hooking: bool,
    norm: NormConfig,
}

impl<T: Scalar> HookNetModel<T> {
    /// Random encoders and decoders.
    pub fn new(cfg: &FinetuneConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.hook_depth == 0 {
            return Err(Error::ConfigKeys {
                keys: vec!["finetune.hook_depth".into()],
                details: vec!["finetune.hook_depth: must be at least 1".into()],
            });
        }
        let encoder = DualBranchEncoder::init(cfg.encoder, seeding::derive(cfg.seed, &["segmenter".into(), "encoder".into()]));
        let widths = cfg.encoder.stage_widths();
        let context_decoder = Decoder::new("context", widths, widths[3], cfg.classes);
        let hooked = context_decoder.out_channels(cfg.hook_depth);
        let target_decoder = Decoder::new("target", widths, widths[3] + hooked, cfg.classes);
        let mut decoders = ParamStore::new("decoder");
        let mut rng = seeding::rng(cfg.seed, &["segmenter".into(), "decoder".into()]);
        context_decoder.init(&mut decoders, &mut rng);
        target_decoder.init(&mut decoders, &mut rng);
        Ok(HookNetModel {
            encoder,
            decoders,
            context_decoder,
            target_decoder,
            classes: cfg.classes,
            hook_depth: cfg.hook_depth,
            hooking: cfg.hooking,
            norm: cfg.encoder.norm(),
        })
    }

    /// Copies both encoders from a pretraining checkpoint; decoders stay fresh.
    pub fn init_from_pretrained(cfg: &FinetuneConfig, dir: &Path) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        checkpoint::load_store(&dir.join("context"), &mut model.encoder.context)?;
        checkpoint::load_store(&dir.join("target"), &mut model.encoder.target)?;
        Ok(model)
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<T>; 3] {
        [&mut self.encoder.context, &mut self.encoder.target, &mut self.decoders]
    }

    /// `context` and `target` are paired `[n, 3, s, s]` batches.
    pub fn forward(&mut self, g: &mut Graph<T>, context: Var, target: Var, mode: Mode, context_logits: bool) -> Result<SegOutput> {
        let (nc, nt) = (g.shape(context)[0], g.shape(target)[0]);
        if nc != nt {
            return Err(Error::Precondition(format!("{nc} context patches paired with {nt} targets")));
        }
        let cf = self.encoder.forward_stages(g, Branch::Context, context, mode)?;
        let tf = self.encoder.forward_stages(g, Branch::Target, target, mode)?;
        let HookNetModel {
            decoders,
            context_decoder,
            target_decoder,
            norm,
            hook_depth,
            ..
        } = self;
        let (norm, depth) = (*norm, *hook_depth);
        let ctx_map = context_decoder.run(g, decoders, cf.stages[3], &cf, 0..depth, mode, norm);
        let (fused, hook_offset) = if self.hooking {
            let (f, o) = hook_features(g, ctx_map, tf.stages[3])?;
            (f, Some(o))
        } else {
            let (n, _, h, w) = g.value(tf.stages[3]).dims4();
            let zeros = g.constant(Tensor::zeros(&[n, context_decoder.out_channels(depth), h, w]));
            (g.concat_dim1(&[tf.stages[3], zeros]), None)
        };
        let t = target_decoder.run(g, decoders, fused, &tf, 0..DECODER_DEPTHS, mode, norm);
        let target_logits = target_decoder.head.forward(g, decoders, t);
        let context = context_logits.then(|| {
            let c = context_decoder.run(g, decoders, ctx_map, &cf, depth..DECODER_DEPTHS, mode, norm);
            context_decoder.head.forward(g, decoders, c)
        });
        Ok(SegOutput {
            target: target_logits,
            context,
            hook_offset,
        })
    }

    pub fn save(&self, dir: &Path, cfg: &FinetuneConfig) -> Result<()> {
        checkpoint::write_dir_atomic(dir, |tmp| {
            let widths = cfg.encoder.stage_widths();
            checkpoint::save_store(&tmp.join("context"), &self.encoder.context, "context", widths, cfg.seed)?;
            checkpoint::save_store(&tmp.join("target"), &self.encoder.target, "target", widths, cfg.seed)?;
            checkpoint::save_store(&tmp.join("decoders"), &self.decoders, "decoders", widths, cfg.seed)?;
            checkpoint::write_json(&tmp.join("config.json"), cfg)
        })
    }

    pub fn load(dir: &Path, cfg: &FinetuneConfig) -> Result<Self> {
        let mut model = Self::new(cfg)?;
        checkpoint::load_store(&dir.join("context"), &mut model.encoder.context)?;
        checkpoint::load_store(&dir.join("target"), &mut model.encoder.target)?;
        checkpoint::load_store(&dir.join("decoders"), &mut model.decoders)?;
        Ok(model)
    }
}

fn check_labels(labels: &[u32], classes: usize, ignore_index: Option<u32>) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= classes && Some(l) != ignore_index) {
        Some(l) => Err(Error::Argument(format!("label {l} outside 0..{classes}"))),
        None => Ok(()),
    }
}

/// `lambda * CE(target) + (1 - lambda) * CE(context)`. At `lambda = 1` the
/// context branch is not consulted at all.
pub fn seg_loss<T: Scalar>(
    g: &mut Graph<T>,
    target_logits: Var,
    labels: &[u32],
    context: Option<(Var, &[u32])>,
    lambda: f64,
    ignore_index: Option<u32>,
) -> Result<Var> {
    let classes = g.shape(target_logits)[1];
    check_labels(labels, classes, ignore_index)?;
    let expect = g.value(target_logits).len() / classes;
    if labels.len() != expect {
        return Err(Error::Precondition(format!("{} labels for {expect} pixels", labels.len())));
    }
    let lt = g.cross_entropy(target_logits, labels, ignore_index);
    if lambda >= 1.0 {
        return Ok(lt);
    }
    let (cl, clabels) = context.ok_or_else(|| Error::Precondition("lambda < 1 needs context logits and labels".into()))?;
    check_labels(clabels, classes, ignore_index)?;
    if clabels.len() != g.value(cl).len() / classes {
        return Err(Error::Precondition("context label count differs from context pixels".into()));
    }
    let lc = g.cross_entropy(cl, clabels, ignore_index);
    Ok(g.weighted_sum(&[lt, lc], &[T::c(lambda), T::c(1.0 - lambda)]))
}

/// One (context, target) pair: a group index and a target slot.
pub type Sample = (usize, usize);

pub struct SegBatch {
    pub context: Tensor<f32>,
    pub target: Tensor<f32>,
    pub labels: Vec<u32>,
    pub context_labels: Option<Vec<u32>>,
}

fn label_vec(img: &Option<GrayImage>, what: &str) -> Result<Vec<u32>> {
    img.as_ref()
        .map(|l| l.as_raw().iter().map(|&v| v as u32).collect())
        .ok_or_else(|| Error::Precondition(format!("{what} has no label map")))
}

pub fn build_batch(groups: &[GroupPixels], items: &[Sample], with_labels: bool, context_labels: bool) -> Result<SegBatch> {
    let norm = AugmentConfig::default();
    let (mut ctx, mut tgt, mut labels, mut clabels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut side = 0;
    for &(gi, slot) in items {
        let g = &groups[gi];
        let t = &g.targets[slot];
        side = t.image.width() as usize;
        ctx.extend(normalized(&g.context.image, &norm).into_data());
        tgt.extend(normalized(&t.image, &norm).into_data());
        if with_labels {
            labels.extend(label_vec(&t.label, &g.group.targets[slot].patch_id)?);
        }
        if context_labels {
            clabels.extend(label_vec(&g.context.label, &g.group.context.patch_id)?);
        }
    }
    let shape = vec![items.len(), 3, side, side];
    Ok(SegBatch {
        context: Tensor::new(shape.clone(), ctx)?,
        target: Tensor::new(shape, tgt)?,
        labels,
        context_labels: context_labels.then_some(clabels),
    })
}

fn argmax_maps<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<u32>> {
    let (n, c, h, w) = logits.dims4();
    let hw = h * w;
    let x = logits.data();
    (0..n)
        .map(|b| {
            (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for k in 1..c {
                        if x[(b * c + k) * hw + p] > x[(b * c + best) * hw + p] {
                            best = k;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect()
}

/// Evaluation-mode class maps for every target of `groups`, visited in
/// batches; `visit` receives the sample and its row-major prediction.
pub fn predict_groups<T: Scalar>(
    model: &mut HookNetModel<T>,
    groups: &[GroupPixels],
    batch_size: usize,
    mut visit: impl FnMut(Sample, Vec<u32>) -> Result<()>,
) -> Result<()> {
    let samples: Vec<Sample> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, g)| (0..g.targets.len()).map(move |s| (gi, s)))
        .collect();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = build_batch(groups, chunk, false, false)?;
        let mut g = Graph::inference();
        let c = g.constant(batch.context.cast());
        let t = g.constant(batch.target.cast());
        let out = model.forward(&mut g, c, t, Mode::Eval, false)?;
        for (s, pred) in chunk.iter().zip(argmax_maps(g.value(out.target))) {
            visit(*s, pred)?;
        }
    }
    Ok(())
}

pub fn evaluate_groups<T: Scalar>(
    model: &mut HookNetModel<T>,
    groups: &[GroupPixels],
    batch_size: usize,
    ignore_index: Option<u32>,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::new(model.classes);
    let classes = model.classes;
    predict_groups(model, groups, batch_size, |(gi, s), pred| {
        let g = &groups[gi];
        let label = label_vec(&g.targets[s].label, &g.group.targets[s].patch_id)?;
        counts.merge(&confusion_counts(&pred, &label, classes, ignore_index)?)
    })?;
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_f1: f64,
    pub val_micro_f1: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    /// Model of the best validation epoch.
    pub model: HookNetModel<T>,
    pub history: Vec<FinetuneEpoch>,
    pub best_epoch: usize,
    pub best: Metrics,
    pub train_groups: usize,
    pub train_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Random,
    /// A pretraining checkpoint directory.
    Pretrained(std::path::PathBuf),
    /// One encoder store directory copied into both branches.
    External(std::path::PathBuf),
}

/// Fine-tunes on a `fraction` of the training groups (all their slots) and
/// keeps the epoch with the best validation macro F1 (earliest on ties).
pub fn run_finetune<T: Scalar>(train: &[GroupPixels], val: &[GroupPixels], cfg: &FinetuneConfig, init: &Init) -> Result<FinetuneOutcome<T>> {
    cfg.validate()?;
    let mut model = match init {
        Init::Random => HookNetModel::<T>::new(cfg)?,
        Init::Pretrained(dir) => HookNetModel::init_from_pretrained(cfg, dir)?,
        Init::External(dir) => {
            let mut m = HookNetModel::<T>::new(cfg)?;
            checkpoint::load_store(dir, &mut m.encoder.context)?;
            checkpoint::load_store(dir, &mut m.encoder.target)?;
            m
        }
    };
    let kept = subsample_indices(train.len(), cfg.fraction, seeding::derive(cfg.seed, &["fraction".into()]))?;
    if kept.is_empty() {
        return Err(Error::Config(format!(
            "fraction {} of {} training groups leaves nothing to train on",
            cfg.fraction,
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::Precondition("validation split is empty".into()));
    }
    let samples: Vec<Sample> = kept.iter().flat_map(|&gi| (0..train[gi].targets.len()).map(move |s| (gi, s))).collect();
    log::info!("fine-tuning on {} groups ({} pairs) at fraction {}", kept.len(), samples.len(), cfg.fraction);
    let with_context = cfg.lambda < 1.0;
    let mut adam = Adam::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Metrics, HookNetModel<T>)> = None;
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::new();
        let order_seed = seeding::derive(cfg.seed, &["finetune".into()]);
        for idx in epoch_batches(samples.len(), cfg.batch_size, order_seed, epoch) {
            let items: Vec<Sample> = idx.iter().map(|&i| samples[i]).collect();
            let batch = build_batch(train, &items, true, with_context)?;
            let mut g = Graph::new();
            let c = g.constant(batch.context.cast());
            let t = g.constant(batch.target.cast());
            let out = model.forward(&mut g, c, t, Mode::Train, with_context)?;
            let ctx = out.context.zip(batch.context_labels.as_deref());
            let loss = seg_loss(&mut g, out.target, &batch.labels, ctx, cfg.lambda, cfg.ignore_index)?;
            let value = g.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NanLoss {
                    stream: "segmentation".into(),
                    stage: 0,
                });
            }
            losses.push(value);
            let grads = g.backward(loss);
            adam.step(&mut model.stores_mut(), &grads);
        }
        let counts = evaluate_groups(&mut model, val, cfg.batch_size, cfg.ignore_index)?;
        let m = Metrics::from_counts(&counts, None)?;
        let entry = FinetuneEpoch {
            epoch,
            train_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            val_mean_f1: m.mean_f1,
            val_micro_f1: m.micro_f1,
            val_accuracy: m.accuracy,
        };
        log::info!("finetune epoch {epoch}: loss {:.4}, val F1 {:.4}", entry.train_loss, entry.val_mean_f1);
        history.push(entry);
        if best.as_ref().is_none_or(|b| m.mean_f1 > b.1.mean_f1) {
            best = Some((epoch, m, model.clone()));
        }
    }
    let (best_epoch, best, model) = match best {
        Some(b) => b,
        None => {
            let counts = evaluate_groups(&mut model, val, cfg.batch_size, cfg.ignore_index)?;
            (0, Metrics::from_counts(&counts, None)?, model)
        }
    };
    Ok(FinetuneOutcome {
        model,
        history,
        best_epoch,
        best,
        train_groups: kept.len(),
        train_samples: samples.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub patch_id: String,
    pub group_id: String,
    pub slot: usize,
    pub path: String,
}

/// Writes `<patch_id>.png` class maps and `index.json` under `dir`.
pub fn write_predictions<T: Scalar>(model: &mut HookNetModel<T>, groups: &[GroupPixels], batch_size: usize, dir: &Path) -> Result<Vec<PredictionEntry>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = Vec::new();
    predict_groups(model, groups, batch_size, |(gi, s), pred| {
        let rec = &groups[gi].group.targets[s];
        let side = rec.output_size;
        let img = GrayImage::from_fn(side, side, |x, y| Luma([pred[(y * side + x) as usize] as u8]));
        let path = format!("{}.png", rec.patch_id);
        crate::data::slide::write_gray(&dir.join(&path), &img)?;
        index.push(PredictionEntry {
            patch_id: rec.patch_id.clone(),
            group_id: rec.group_id.clone(),
            slot: s,
            path,
        });
        Ok(())
    })?;
    checkpoint::write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> FinetuneConfig {
        FinetuneConfig {
            epochs: 1,
            batch_size: 4,
            encoder: EncoderConfig {
                base_width: 4,
                ..EncoderConfig::default()
            },
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn hook_crop_arithmetic() {
        let mut g = Graph::<f64>::inference();
        let ctx = g.constant(Tensor::zeros(&[2, 64, 14, 14]));
        let bot = g.constant(Tensor::zeros(&[2, 512, 7, 7]));
        let (f, off) = hook_features(&mut g, ctx, bot).unwrap();
        assert_eq!(off, (3, 3));
        assert_eq!(g.shape(f), &[2, 576, 7, 7]);
        let same = g.constant(Tensor::zeros(&[2, 8, 7, 7]));
        assert_eq!(hook_features(&mut g, same, bot).unwrap().1, (0, 0));
        assert!(matches!(hook_features(&mut g, bot, ctx), Err(Error::Config(_))));
    }

    #[test]
    fn logits_match_input_size() {
        let mut model = HookNetModel::<f32>::new(&FinetuneConfig { classes: 5, ..small_cfg() }).unwrap();
        let mut g = Graph::inference();
        let mut rng = seeding::rng(0, &[]);
        let c = g.constant(Tensor::randn(&[2, 3, 64, 64], 1.0, &mut rng));
        let t = g.constant(Tensor::randn(&[2, 3, 64, 64], 1.0, &mut rng));
        let out = model.forward(&mut g, c, t, Mode::Eval, true).unwrap();
        assert_eq!(g.shape(out.target), &[2, 5, 64, 64]);
        assert_eq!(g.shape(out.context.unwrap()), &[2, 5, 64, 64]);
        assert!(g.value(out.target).all_finite());
        assert_eq!(out.hook_offset, Some((3, 3)));
        let one = g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        assert!(matches!(model.forward(&mut g, one, t, Mode::Eval, false), Err(Error::Precondition(_))));
    }

    #[test]
    fn hooking_changes_target_logits() {
        let mut on = HookNetModel::<f64>::new(&small_cfg()).unwrap();
        let mut off = on.clone();
        off.hooking = false;
        let mut rng = seeding::rng(1, &[]);
        let (c, t) = (Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng), Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng));
        let run = |m: &mut HookNetModel<f64>| {
            let mut g = Graph::inference();
            let (cv, tv) = (g.constant(c.clone()), g.constant(t.clone()));
            let out = m.forward(&mut g, cv, tv, Mode::Eval, false).unwrap();
            g.value(out.target).clone()
        };
        assert!(run(&mut on).max_abs_diff(&run(&mut off)) > 1e-6);
    }

    #[test]
    fn cross_entropy_limits() {
        let mut g = Graph::<f64>::inference();
        let uniform = g.constant(Tensor::zeros(&[1, 5, 2, 2]));
        let l = seg_loss(&mut g, uniform, &[0, 1, 2, 4], None, 1.0, None).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-12);
        let mut sharp = Tensor::zeros(&[1, 2, 1, 2]);
        sharp.data_mut().copy_from_slice(&[50.0, -50.0, -50.0, 50.0]);
        let s = g.constant(sharp);
        let l = seg_loss(&mut g, s, &[0, 1], None, 1.0, None).unwrap();
        assert!(g.value(l).item() < 1e-12);
        assert!(matches!(seg_loss(&mut g, s, &[0, 2], None, 1.0, None), Err(Error::Argument(_))));
        assert!(seg_loss(&mut g, s, &[0, 255], None, 1.0, Some(255)).is_ok());
        assert!(seg_loss(&mut g, s, &[0, 1], None, 0.5, None).is_err());
    }

    #[test]
    fn lambda_one_ignores_context_logits() {
        let mut g = Graph::<f64>::new();
        let mut rng = seeding::rng(2, &[]);
        let t = g.param("t", &Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng));
        let c = g.param("c", &Tensor::randn(&[1, 3, 2, 2], 1.0, &mut rng));
        let junk = g.param("junk", &Tensor::full(&[1, 3, 2, 2], 1e6));
        let labels = [0, 1, 2, 1];
        let a = seg_loss(&mut g, t, &labels, Some((c, &labels)), 1.0, None).unwrap();
        let b = seg_loss(&mut g, t, &labels, Some((junk, &labels)), 1.0, None).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let (ga, gb) = (g.backward(a), g.backward(b));
        assert_eq!(ga.get("t"), gb.get("t"));
        assert!(ga.get("c").is_none() && gb.get("junk").is_none());
        let mixed = seg_loss(&mut g, t, &labels, Some((c, &labels)), 0.5, None).unwrap();
        assert!(g.backward(mixed).get("c").is_some());
    }

    #[test]
    fn pretrained_encoders_are_copied() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let src = DualBranchEncoder::<f32>::init(cfg.encoder, 77);
        let w = cfg.encoder.stage_widths();
        checkpoint::save_store(&dir.path().join("context"), &src.context, "context", w, 77).unwrap();
        checkpoint::save_store(&dir.path().join("target"), &src.target, "target", w, 77).unwrap();
        let m = HookNetModel::<f32>::init_from_pretrained(&cfg, dir.path()).unwrap();
        assert_eq!(m.encoder.context, src.context);
        assert_eq!(m.encoder.target, src.target);
        let other = HookNetModel::<f32>::new(&FinetuneConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(m.decoders, other.decoders);
        let wide = FinetuneConfig {
            encoder: EncoderConfig {
                base_width: 8,
                ..cfg.encoder
            },
            ..cfg
        };
        assert!(matches!(
            HookNetModel::<f32>::init_from_pretrained(&wide, dir.path()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn fraction_halves_training_groups_and_reruns_match() {
        let groups = crate::testutil::tiny_groups(1);
        let (train, val) = groups.split_at(2);
        let run = |fraction| run_finetune::<f32>(train, val, &FinetuneConfig { fraction, ..small_cfg() }, &Init::Random).unwrap();
        let full = run(1.0);
        let half = run(0.5);
        assert_eq!((full.train_groups, half.train_groups), (2, 1));
        assert_eq!(full.train_samples, 2 * half.train_samples);
        assert_eq!(run(1.0).history, full.history);
        assert!(matches!(
            run_finetune::<f32>(train, val, &FinetuneConfig { fraction: 0.1, ..small_cfg() }, &Init::Random),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prediction_dump() {
        let dir = tempfile::tempdir().unwrap();
        let groups = crate::testutil::tiny_groups(1);
        let mut model = HookNetModel::<f32>::new(&small_cfg()).unwrap();
        let index = write_predictions(&mut model, &groups[..1], 8, dir.path()).unwrap();
        assert_eq!(index.len(), 16);
        let img = crate::data::slide::read_gray(&dir.path().join(&index[3].path)).unwrap();
        assert_eq!(img.dimensions(), (32, 32));
        assert!(img.pixels().all(|p| p.0[0] < 3));
    }
}
