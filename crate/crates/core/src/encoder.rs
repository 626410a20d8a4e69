//! ResNet-18 backbone exposing all four residual stages, instantiated once
//! per branch with unshared parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Mode, NormConfig, ParamStore};
use crate::scalar::Scalar;
use crate::seeding;

pub const STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Channel width of the first stage; later stages double it.
    pub base_width: usize,
    pub in_channels: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            base_width: 64,
            in_channels: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn stage_widths(&self) -> [usize; STAGES] {
        let w = self.base_width;
        [w, 2 * w, 4 * w, 8 * w]
    }

    pub fn norm(&self) -> NormConfig {
        NormConfig {
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        }
    }

    /// Spatial side of each stage output for a square input of side `input`.
    pub fn stage_sides(&self, input: usize) -> [usize; STAGES] {
        [input / 4, input / 8, input / 16, input / 32]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Context,
    Target,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Context => "context",
            Branch::Target => "target",
        }
    }
}

/// Outputs of one encoder pass: the stem activation (before max-pooling,
/// used by decoder skips) and the four stage maps.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures {
    pub stem: Var,
    pub stages: [Var; STAGES],
}

#[derive(Clone, Debug, PartialEq)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(format!("{prefix}.downsample.0"), cin, cout, 1, stride, 0),
                BatchNorm::new(format!("{prefix}.downsample.1"), cout),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(format!("{prefix}.conv1"), cin, cout, 3, stride, 1),
            bn1: BatchNorm::new(format!("{prefix}.bn1"), cout),
            conv2: Conv2d::new(format!("{prefix}.conv2"), cout, cout, 3, 1, 1),
            bn2: BatchNorm::new(format!("{prefix}.bn2"), cout),
            down,
        }
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.conv1.init(store, rng);
        self.bn1.init(store);
        self.conv2.init(store, rng);
        self.bn2.init(store);
        if let Some((c, b)) = &self.down {
            c.init(store, rng);
            b.init(store);
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        norm: NormConfig,
    ) -> Var {
        let h = self.conv1.forward(g, store, x);
        let h = self.bn1.forward(g, store, h, mode, norm);
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h);
        let h = self.bn2.forward(g, store, h, mode, norm);
        let skip = match &self.down {
            Some((c, b)) => {
                let s = c.forward(g, store, x);
                b.forward(g, store, s, mode, norm)
            }
            None => x,
        };
        let sum = g.add(h, skip);
        g.relu(sum)
    }
}

/// ResNet-18 topology (parameters live in a [`ParamStore`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ResNet18 {
    pub cfg: EncoderConfig,
    stem: Conv2d,
    stem_bn: BatchNorm,
    layers: Vec<Vec<BasicBlock>>,
}

impl ResNet18 {
    pub fn new(cfg: EncoderConfig) -> Self {
        let widths = cfg.stage_widths();
        let mut layers = Vec::with_capacity(STAGES);
        let mut cin = widths[0];
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let name = format!("layer{}", i + 1);
            layers.push(vec![
                BasicBlock::new(&format!("{name}.0"), cin, w, stride),
                BasicBlock::new(&format!("{name}.1"), w, w, 1),
            ]);
            cin = w;
        }
        ResNet18 {
            cfg,
            stem: Conv2d::new("conv1", cfg.in_channels, widths[0], 7, 2, 3),
            stem_bn: BatchNorm::new("bn1", widths[0]),
            layers,
        }
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.stem.init(store, rng);
        self.stem_bn.init(store);
        for block in self.layers.iter().flatten() {
            block.init(store, rng);
        }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ok = shape.len() == 4
            && shape[0] >= 1
            && shape[1] == self.cfg.in_channels
            && shape[2] >= 32
            && shape[2] % 32 == 0
            && shape[3] >= 32
            && shape[3] % 32 == 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Precondition(format!(
                "encoder input must be [n, {}, h, w] with h, w multiples of 32; got {:?}",
                self.cfg.in_channels, shape
            )))
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<StageFeatures> {
        self.check_input(g.shape(x))?;
        let norm = self.cfg.norm();
        let h = self.stem.forward(g, store, x);
        let h = self.stem_bn.forward(g, store, h, mode, norm);
        let stem = g.relu(h);
        let mut h = g.max_pool2d(stem, 3, 2, 1);
        let mut stages = [h; STAGES];
        for (i, layer) in self.layers.iter().enumerate() {
            for block in layer {
                h = block.forward(g, store, h, mode, norm);
            }
            stages[i] = h;
        }
        Ok(StageFeatures { stem, stages })
    }
}

/// Spatial mean of a `[n, c, h, w]` map, giving `[n, c]`.
pub fn global_pool<T: Scalar>(g: &mut Graph<T>, map: Var) -> Var {
    g.global_avg_pool(map)
}

/// Context and target backbones of identical topology.
#[derive(Clone, Debug)]
pub struct DualBranchEncoder<T> {
    pub net: ResNet18,
    pub context: ParamStore<T>,
    pub target: ParamStore<T>,
    pub seed: u64,
}

impl<T: Scalar> DualBranchEncoder<T> {
    /// Both branches drawn from independent sub-seeds of `seed`.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Self {
        let net = ResNet18::new(cfg);
        let mut context = ParamStore::new("encoder.context");
        let mut target = ParamStore::new("encoder.target");
        net.init(&mut context, &mut seeding::rng(seed, &["encoder".into(), "context".into()]));
        net.init(&mut target, &mut seeding::rng(seed, &["encoder".into(), "target".into()]));
        DualBranchEncoder {
            net,
            context,
            target,
            seed,
        }
    }

    pub fn store(&self, branch: Branch) -> &ParamStore<T> {
        match branch {
            Branch::Context => &self.context,
            Branch::Target => &self.target,
        }
    }

    pub fn store_mut(&mut self, branch: Branch) -> &mut ParamStore<T> {
        match branch {
            Branch::Context => &mut self.context,
            Branch::Target => &mut self.target,
        }
    }

    pub fn forward_stages(
        &mut self,
        g: &mut Graph<T>,
        branch: Branch,
        x: Var,
        mode: Mode,
    ) -> Result<StageFeatures> {
        let net = &self.net;
        let store = match branch {
            Branch::Context => &mut self.context,
            Branch::Target => &mut self.target,
        };
        net.forward(g, store, x, mode)
    }
}
