//! Context-target fusion: the masked jigsaw over target-patch features.
//!
//! For one group and one view, the `m` pooled target vectors are permuted,
//! a fixed number of slots is zeroed, and the result is appended to the
//! context vector, giving a cross-branch feature of width `(m + 1) * c`.
//! The context slot is never masked.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which halves of the masked jigsaw are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Permute and mask.
    #[default]
    Full,
    /// Permute only; no slot is masked.
    JigsawOnly,
    /// Mask only; the permutation is the identity.
    MaskOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub m: usize,
    /// Slot `j` of the fused vector takes target `permutation[j]`.
    pub permutation: Vec<usize>,
    /// Sorted slot indices that are zeroed.
    pub mask_set: Vec<usize>,
    pub mask_ratio: f64,
}

impl FusionPlan {
    pub fn identity(m: usize) -> Self {
        FusionPlan {
            m,
            permutation: (0..m).collect(),
            mask_set: Vec::new(),
            mask_ratio: 0.0,
        }
    }

    pub fn is_masked(&self, slot: usize) -> bool {
        self.mask_set.binary_search(&slot).is_ok()
    }

    /// Source target index of every slot, `None` for masked slots.
    pub fn slot_sources(&self) -> Vec<Option<usize>> {
        (0..self.m)
            .map(|j| (!self.is_masked(j)).then_some(self.permutation[j]))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.m];
        for &p in &self.permutation {
            if p >= self.m || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Validation(format!(
                    "permutation {:?} is not a bijection on 0..{}",
                    self.permutation, self.m
                )));
            }
        }
        if self.permutation.len() != self.m {
            return Err(Error::Validation("permutation length differs from m".into()));
        }
        if self.mask_set.windows(2).any(|w| w[0] >= w[1]) || self.mask_set.iter().any(|&s| s >= self.m) {
            return Err(Error::Validation(format!("invalid mask set {:?}", self.mask_set)));
        }
        Ok(())
    }
}

/// Number of masked slots: `floor(m * ratio)`.
pub fn masked_count(m: usize, ratio: f64) -> usize {
    // tolerate representation error such as 16 * 0.3 = 4.8000000000000001
    ((m as f64) * ratio + 1e-9).floor() as usize
}

/// Uniform permutation plus a uniformly drawn mask set of `floor(m * ratio)` slots.
pub fn sample_fusion_plan<R: Rng + ?Sized>(m: usize, mask_ratio: f64, rng: &mut R) -> Result<FusionPlan> {
    sample_fusion_plan_with(m, mask_ratio, FusionMode::Full, rng)
}

pub fn sample_fusion_plan_with<R: Rng + ?Sized>(
    m: usize,
    mask_ratio: f64,
    mode: FusionMode,
    rng: &mut R,
) -> Result<FusionPlan> {
    if m == 0 {
        return Err(Error::Argument("fusion needs m >= 1 target slots".into()));
    }
    if !(0.0..=1.0).contains(&mask_ratio) || mask_ratio.is_nan() {
        return Err(Error::Argument(format!("mask ratio {mask_ratio} outside [0, 1]")));
    }
    let mut permutation: Vec<usize> = (0..m).collect();
    if mode != FusionMode::MaskOnly {
        permutation.shuffle(rng);
    }
    let (ratio, count) = match mode {
        FusionMode::JigsawOnly => (0.0, 0),
        _ => (mask_ratio, masked_count(m, mask_ratio)),
    };
    let mut mask_set = index::sample(rng, m, count).into_vec();
    mask_set.sort_unstable();
    Ok(FusionPlan {
        m,
        permutation,
        mask_set,
        mask_ratio: ratio,
    })
}

/// Fused vector for one group: `[context | slot_0 | ... | slot_{m-1}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossBranchFeature<T> {
    pub channels: usize,
    pub m: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> CrossBranchFeature<T> {
    pub fn context(&self) -> &[T] {
        &self.values[..self.channels]
    }

    pub fn slot(&self, j: usize) -> &[T] {
        let c = self.channels;
        &self.values[(j + 1) * c..(j + 2) * c]
    }
}

pub fn fuse<T: Scalar>(context: &[T], targets: &[Vec<T>], plan: &FusionPlan) -> Result<CrossBranchFeature<T>> {
    let c = context.len();
    if targets.len() != plan.m {
        return Err(Error::Precondition(format!(
            "plan has {} slots, got {} target vectors",
            plan.m,
            targets.len()
        )));
    }
    if let Some(t) = targets.iter().find(|t| t.len() != c) {
        return Err(Error::Precondition(format!(
            "target width {} differs from context width {c}",
            t.len()
        )));
    }
    plan.validate()?;
    let mut values = Vec::with_capacity((plan.m + 1) * c);
    values.extend_from_slice(context);
    for src in plan.slot_sources() {
        match src {
            Some(i) => values.extend_from_slice(&targets[i]),
            None => values.extend(std::iter::repeat_n(T::zero(), c)),
        }
    }
    Ok(CrossBranchFeature {
        channels: c,
        m: plan.m,
        values,
    })
}

/// Batched fusion on the tape.
///
/// `context: [b, c]`, `targets: [b * m, c]` (group-major), one plan per
/// group. Returns `[b, (m + 1) * c]`.
pub fn fuse_batch<T: Scalar>(
    g: &mut Graph<T>,
    context: Var,
    targets: Var,
    plans: &[FusionPlan],
) -> Result<Var> {
    let (b, c) = g.value(context).dims2();
    let (rows, tc) = g.value(targets).dims2();
    if plans.len() != b {
        return Err(Error::Precondition(format!("{} plans for {b} groups", plans.len())));
    }
    let m = plans.first().map_or(0, |p| p.m);
    if tc != c || rows != b * m || plans.iter().any(|p| p.m != m) {
        return Err(Error::Precondition(format!(
            "fusion shapes: context [{b}, {c}], targets [{rows}, {tc}], m = {m}"
        )));
    }
    let mut index = Vec::with_capacity(b * m);
    for (gi, plan) in plans.iter().enumerate() {
        plan.validate()?;
        index.extend(plan.slot_sources().into_iter().map(|s| s.map(|i| gi * m + i)));
    }
    let slots = g.gather_rows(targets, &index);
    let slots = g.reshape(slots, &[b, m * c]);
    Ok(g.concat_dim1(&[context, slots]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;
    use crate::tensor::Tensor;

    #[test]
    fn half_ratio_masks_eight_of_sixteen() {
        let plan = sample_fusion_plan(16, 0.5, &mut seeding::rng(0, &[])).unwrap();
        assert_eq!(plan.mask_set.len(), 8);
        plan.validate().unwrap();
    }

    #[test]
    fn ratio_extremes() {
        let mut rng = seeding::rng(1, &[]);
        assert!(sample_fusion_plan(16, 0.0, &mut rng).unwrap().mask_set.is_empty());
        assert_eq!(sample_fusion_plan(16, 1.0, &mut rng).unwrap().mask_set.len(), 16);
        assert!(matches!(sample_fusion_plan(16, 1.5, &mut rng), Err(Error::Argument(_))));
        assert!(sample_fusion_plan(16, -0.1, &mut rng).is_err());
    }

    #[test]
    fn hand_evaluated_fixture() {
        let targets = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0], vec![4.0, 4.0]];
        let plan = FusionPlan {
            m: 4,
            permutation: vec![2, 0, 3, 1],
            mask_set: vec![1],
            mask_ratio: 0.25,
        };
        let f = fuse(&[9.0f64, 8.0], &targets, &plan).unwrap();
        assert_eq!(f.values, vec![9.0, 8.0, 3.0, 3.0, 0.0, 0.0, 4.0, 4.0, 2.0, 2.0]);
    }

    #[test]
    fn identity_plan_is_plain_concatenation() {
        let targets: Vec<Vec<f32>> = (0..16).map(|i| vec![i as f32; 64]).collect();
        let ctx = vec![-1.0f32; 64];
        let f = fuse(&ctx, &targets, &FusionPlan::identity(16)).unwrap();
        assert_eq!(f.values.len(), 1088);
        for j in 0..16 {
            assert_eq!(f.slot(j), &targets[j][..]);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let plan = FusionPlan::identity(2);
        assert!(fuse(&[1.0f64, 2.0], &[vec![1.0], vec![2.0, 3.0]], &plan).is_err());
        assert!(fuse(&[1.0f64], &[vec![1.0]], &plan).is_err());
    }

    #[test]
    fn ablation_modes() {
        let mut rng = seeding::rng(2, &[]);
        let j = sample_fusion_plan_with(16, 0.5, FusionMode::JigsawOnly, &mut rng).unwrap();
        assert!(j.mask_set.is_empty());
        let m = sample_fusion_plan_with(16, 0.5, FusionMode::MaskOnly, &mut rng).unwrap();
        assert_eq!(m.permutation, (0..16).collect::<Vec<_>>());
        assert_eq!(m.mask_set.len(), 8);
    }

    #[test]
    fn batch_fusion_matches_pure_fusion() {
        let (b, m, c) = (3, 4, 2);
        let mut rng = seeding::rng(3, &[]);
        let ctx = Tensor::<f64>::randn(&[b, c], 1.0, &mut rng);
        let tgt = Tensor::<f64>::randn(&[b * m, c], 1.0, &mut rng);
        let plans: Vec<FusionPlan> = (0..b).map(|_| sample_fusion_plan(m, 0.5, &mut rng).unwrap()).collect();
        let mut g = Graph::inference();
        let cv = g.constant(ctx.clone());
        let tv = g.constant(tgt.clone());
        let fused = fuse_batch(&mut g, cv, tv, &plans).unwrap();
        assert_eq!(g.shape(fused), &[b, (m + 1) * c]);
        for gi in 0..b {
            let targets: Vec<Vec<f64>> = (0..m)
                .map(|i| tgt.data()[(gi * m + i) * c..(gi * m + i + 1) * c].to_vec())
                .collect();
            let pure = fuse(&ctx.data()[gi * c..(gi + 1) * c], &targets, &plans[gi]).unwrap();
            assert_eq!(&g.value(fused).data()[gi * (m + 1) * c..(gi + 1) * (m + 1) * c], &pure.values[..]);
        }
    }
}
