//! Slide-level cross-validation folds and nested label-fraction subsets.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::tiling::ContextGroup;
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub k: usize,
    pub seed: u64,
    pub slide_folds: BTreeMap<String, usize>,
    /// group_id -> fold index.
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSpec {
    pub fn fold_of(&self, group_id: &str) -> Option<usize> {
        self.assignments.get(group_id).copied()
    }

    /// Groups validated in `fold`, in input order.
    pub fn validation<'a>(&self, groups: &'a [ContextGroup], fold: usize) -> Vec<&'a ContextGroup> {
        groups
            .iter()
            .filter(|g| self.fold_of(&g.group_id) == Some(fold))
            .collect()
    }

    pub fn training<'a>(&self, groups: &'a [ContextGroup], fold: usize) -> Vec<&'a ContextGroup> {
        groups
            .iter()
            .filter(|g| self.fold_of(&g.group_id).is_some_and(|f| f != fold))
            .collect()
    }

    pub fn validation_slides(&self, fold: usize) -> Vec<&str> {
        self.slide_folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }
}

/// Shuffles the distinct slides under `seed` and deals them round-robin
/// into `k` folds, so every group of a slide shares its fold.
pub fn split_folds(groups: &[ContextGroup], k: usize, seed: u64) -> Result<FoldSpec> {
    let slides: BTreeSet<&str> = groups.iter().map(|g| g.slide_id()).collect();
    if k < 2 {
        return Err(Error::Config(format!("k = {k}; need at least 2 folds")));
    }
    if slides.len() < k {
        return Err(Error::Config(format!("{} slides cannot fill {k} folds", slides.len())));
    }
    let mut order: Vec<&str> = slides.into_iter().collect();
    order.shuffle(&mut seeding::rng(seed, &["folds".into()]));
    let slide_folds: BTreeMap<String, usize> = order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.to_string(), i % k))
        .collect();
    let assignments = groups
        .iter()
        .map(|g| (g.group_id.clone(), slide_folds[g.slide_id()]))
        .collect();
    Ok(FoldSpec {
        k,
        seed,
        slide_folds,
        assignments,
    })
}

/// Number of items kept at `fraction`.
pub fn fraction_count(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// The first `round(fraction * n)` items of one seeded shuffle, returned in
/// input order. Smaller fractions are prefixes of larger ones.
pub fn subsample_fraction<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    Ok(subsample_indices(items.len(), fraction, seed)?
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!("fraction {fraction} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng(seed, &["fraction".into()]));
    let mut keep = order[..fraction_count(n, fraction)].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tiling::{PatchRecord, Role};

    fn fake_groups(slides: usize, per_slide: usize) -> Vec<ContextGroup> {
        let mut out = Vec::new();
        for s in 0..slides {
            for g in 0..per_slide {
                let gid = format!("s{s:02}_g{g:03}");
                let rec = PatchRecord {
                    patch_id: format!("{gid}_c"),
                    slide_id: format!("s{s:02}"),
                    role: Role::Context,
                    origin_x: 0,
                    origin_y: 0,
                    window: 1024,
                    output_size: 32,
                    tissue_fraction: 1.0,
                    group_id: gid.clone(),
                    slot_index: -1,
                    label_path: None,
                };
                out.push(ContextGroup {
                    group_id: gid,
                    context: rec,
                    targets: Vec::new(),
                });
            }
        }
        out
    }

    #[test]
    fn fifty_slides_ten_per_fold() {
        let groups = fake_groups(50, 3);
        let spec = split_folds(&groups, 5, 0).unwrap();
        for f in 0..5 {
            assert_eq!(spec.validation_slides(f).len(), 10);
            assert_eq!(spec.validation(&groups, f).len(), 30);
            assert_eq!(spec.training(&groups, f).len(), 120);
        }
        assert_eq!(spec, split_folds(&groups, 5, 0).unwrap());
        assert_ne!(spec, split_folds(&groups, 5, 1).unwrap());
    }

    #[test]
    fn slides_never_straddle_folds() {
        let groups = fake_groups(7, 4);
        let spec = split_folds(&groups, 5, 3).unwrap();
        for g in &groups {
            assert_eq!(spec.fold_of(&g.group_id), Some(spec.slide_folds[g.slide_id()]));
        }
    }

    #[test]
    fn five_slides_one_each_and_too_few_rejected() {
        let groups = fake_groups(5, 2);
        let spec = split_folds(&groups, 5, 9).unwrap();
        for f in 0..5 {
            assert_eq!(spec.validation_slides(f).len(), 1);
        }
        assert!(matches!(split_folds(&fake_groups(4, 9), 5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn fraction_counts_and_nesting() {
        let items: Vec<usize> = (0..1000).collect();
        assert_eq!(subsample_fraction(&items, 0.1, 0).unwrap().len(), 100);
        assert_eq!(subsample_fraction(&items, 1.0, 0).unwrap(), items);
        let a: BTreeSet<usize> = subsample_fraction(&items, 0.01, 4).unwrap().into_iter().collect();
        let b: BTreeSet<usize> = subsample_fraction(&items, 0.1, 4).unwrap().into_iter().collect();
        let c: BTreeSet<usize> = subsample_fraction(&items, 0.5, 4).unwrap().into_iter().collect();
        assert!(a.is_subset(&b) && b.is_subset(&c));
        assert!(subsample_fraction(&items, 0.0, 0).is_err());
        assert!(subsample_fraction(&items, 1.5, 0).is_err());
    }

    #[test]
    fn different_seeds_overlap_by_intersection() {
        let items: Vec<usize> = (0..1000).collect();
        let a: BTreeSet<usize> = subsample_fraction(&items, 0.5, 0).unwrap().into_iter().collect();
        let b: BTreeSet<usize> = subsample_fraction(&items, 0.5, 1).unwrap().into_iter().collect();
        assert_ne!(a, b);
        let overlap = items.iter().filter(|i| a.contains(i) && b.contains(i)).count();
        assert_eq!(overlap, a.intersection(&b).count());
        // independent halves overlap by about a quarter of the population
        assert!((200..300).contains(&overlap), "{overlap}");
    }
}
