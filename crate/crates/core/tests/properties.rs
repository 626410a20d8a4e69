use proptest::prelude::*;

use dsfwsi_core::ctfm::{fuse, sample_fusion_plan, sample_fusion_plan_with, FusionMode};
use dsfwsi_core::eval::{confusion_counts, f1_score};
use dsfwsi_core::seeding;

fn labelled(max_classes: usize) -> impl Strategy<Value = (usize, Vec<(u32, u32)>)> {
    (2..=max_classes).prop_flat_map(|c| (Just(c), prop::collection::vec((0..c as u32, 0..c as u32), 1..200)))
}

proptest! {
    #[test]
    fn counts_add_over_splits((classes, pairs) in labelled(5), cut in 0usize..200) {
        let cut = cut.min(pairs.len());
        let (pred, label): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
        let whole = confusion_counts(&pred, &label, classes, None).unwrap();
        let mut parts = confusion_counts(&pred[..cut], &label[..cut], classes, None).unwrap();
        parts.merge(&confusion_counts(&pred[cut..], &label[cut..], classes, None).unwrap()).unwrap();
        prop_assert_eq!(whole.total(), pairs.len() as u64);
        prop_assert_eq!(parts, whole);
    }

    #[test]
    fn f1_follows_class_relabelling((classes, pairs) in labelled(5), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<u32> = (0..classes as u32).collect();
        perm.shuffle(&mut seeding::rng(seed, &[]));
        let (pred, label): (Vec<u32>, Vec<u32>) = pairs.iter().copied().unzip();
        let a = f1_score(&confusion_counts(&pred, &label, classes, None).unwrap());
        let rp: Vec<u32> = pred.iter().map(|&p| perm[p as usize]).collect();
        let rl: Vec<u32> = label.iter().map(|&l| perm[l as usize]).collect();
        let b = f1_score(&confusion_counts(&rp, &rl, classes, None).unwrap());
        for k in 0..classes {
            prop_assert!((a.per_class[k] - b.per_class[perm[k] as usize]).abs() < 1e-12);
        }
        prop_assert!((a.macro_mean - b.macro_mean).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.macro_mean));
    }

    #[test]
    fn plans_are_valid(m in 1usize..40, ratio in 0.0f64..=1.0, seed in any::<u64>(), mode in 0u8..3) {
        let mode = [FusionMode::Full, FusionMode::JigsawOnly, FusionMode::MaskOnly][mode as usize];
        let plan = sample_fusion_plan_with(m, ratio, mode, &mut seeding::rng(seed, &[])).unwrap();
        plan.validate().unwrap();
        let masked = if mode == FusionMode::JigsawOnly { 0 } else { (m as f64 * ratio + 1e-9).floor() as usize };
        prop_assert_eq!(plan.mask_set.len(), masked);
    }

    #[test]
    fn fusion_keeps_every_unmasked_target(m in 1usize..20, c in 1usize..6, seed in any::<u64>()) {
        let mut rng = seeding::rng(seed, &[]);
        let plan = sample_fusion_plan(m, 0.5, &mut rng).unwrap();
        let ctx: Vec<f64> = (0..c).map(|i| -(i as f64) - 1.0).collect();
        let targets: Vec<Vec<f64>> = (0..m).map(|t| vec![t as f64 + 1.0; c]).collect();
        let f = fuse(&ctx, &targets, &plan).unwrap();
        prop_assert_eq!(f.values.len(), (m + 1) * c);
        let mut kept: Vec<usize> = (0..m).filter(|&j| !plan.is_masked(j)).map(|j| f.slot(j)[0] as usize - 1).collect();
        kept.sort_unstable();
        kept.dedup();
        prop_assert_eq!(kept.len(), m - plan.mask_set.len());
    }
}
