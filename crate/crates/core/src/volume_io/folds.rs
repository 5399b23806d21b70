//! Stratified k-fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Grade};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// A stratified partition of case ids into `k` folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.get(id).copied()
    }

    /// Case ids held out in `fold`, in manifest order.
    pub fn test_ids<'a>(&self, manifest: &'a DatasetManifest, fold: usize) -> Vec<&'a str> {
        manifest
            .cases
            .iter()
            .filter(|c| self.assignments.get(&c.id) == Some(&fold))
            .map(|c| c.id.as_str())
            .collect()
    }

    /// Case ids used for training in `fold`, in manifest order.
    pub fn train_ids<'a>(&self, manifest: &'a DatasetManifest, fold: usize) -> Vec<&'a str> {
        manifest
            .cases
            .iter()
            .filter(|c| self.assignments.get(&c.id) != Some(&fold))
            .map(|c| c.id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Stratified assignment: each class is split as evenly as possible across
/// folds, and class remainders go to the currently smallest folds so total
/// fold sizes differ by at most one.
pub fn make_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Stratification(format!("k must be >= 2, got {k}")));
    }
    for (grade, n) in &manifest.class_counts {
        if *n < k {
            return Err(Error::Stratification(format!(
                "class {} has {} cases, fewer than k={}",
                grade.name(),
                n,
                k
            )));
        }
    }

    let mut rng = rng_for(seed, Stream::Folds);
    let mut assignments = BTreeMap::new();
    let mut totals = vec![0usize; k];

    for grade in Grade::ALL {
        let mut ids: Vec<&str> = manifest
            .cases
            .iter()
            .filter(|c| c.label == grade)
            .map(|c| c.id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        ids.shuffle(&mut rng);

        let base = ids.len() / k;
        let remainder = ids.len() % k;
        // Give the extra case to the folds with the smallest running totals
        // (ties broken by fold index).
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&f| (totals[f], f));
        let mut counts = vec![base; k];
        for &f in order.iter().take(remainder) {
            counts[f] += 1;
        }

        let mut cursor = 0;
        for (fold, &c) in counts.iter().enumerate() {
            for id in &ids[cursor..cursor + c] {
                assignments.insert((*id).to_string(), fold);
            }
            totals[fold] += c;
            cursor += c;
        }
    }

    Ok(FoldSplit { k, assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::{CaseDescriptor, CaseSource};
    use proptest::prelude::*;

    fn manifest(n_hgg: usize, n_lgg: usize) -> DatasetManifest {
        let mut cases = Vec::new();
        for i in 0..n_hgg {
            cases.push(CaseDescriptor {
                id: format!("h{i:03}"),
                source: CaseSource::Seed { seed: i as u64 },
                label: Grade::HGG,
            });
        }
        for i in 0..n_lgg {
            cases.push(CaseDescriptor {
                id: format!("l{i:03}"),
                source: CaseSource::Seed { seed: 1000 + i as u64 },
                label: Grade::LGG,
            });
        }
        DatasetManifest::from_cases(cases)
    }

    fn class_counts_per_fold(m: &DatasetManifest, s: &FoldSplit) -> Vec<(usize, usize)> {
        let mut counts = vec![(0usize, 0usize); s.k];
        for c in &m.cases {
            let f = s.fold_of(&c.id).unwrap();
            match c.label {
                Grade::HGG => counts[f].0 += 1,
                Grade::LGG => counts[f].1 += 1,
            }
        }
        counts
    }

    #[test]
    fn brats_sized_split_has_expected_fold_sizes() {
        // 369 cases, k=5: totals {74,74,74,74,73}.
        let m = manifest(293, 76);
        let s = make_folds(&m, 5, 0).unwrap();
        let mut sizes = s.fold_sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![73, 74, 74, 74, 74]);
        // 76 LGG across 5 folds: each fold holds 15 or 16.
        for (_, lgg) in class_counts_per_fold(&m, &s) {
            assert!(lgg == 15 || lgg == 16, "lgg per fold = {lgg}");
        }
    }

    #[test]
    fn balanced_ten_cases_give_one_per_class_per_fold() {
        let m = manifest(5, 5);
        let s = make_folds(&m, 5, 3).unwrap();
        for (hgg, lgg) in class_counts_per_fold(&m, &s) {
            assert_eq!((hgg, lgg), (1, 1));
        }
    }

    #[test]
    fn class_smaller_than_k_is_rejected() {
        let m = manifest(10, 3);
        assert!(matches!(
            make_folds(&m, 5, 0),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let m = manifest(20, 10);
        let a = make_folds(&m, 5, 11).unwrap();
        let b = make_folds(&m, 5, 11).unwrap();
        assert_eq!(a.assignments, b.assignments);
        let c = make_folds(&m, 5, 12).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_is_disjoint_exhaustive_and_proportional(
            n_hgg in 5usize..60,
            n_lgg in 5usize..60,
            seed in 0u64..100,
        ) {
            let k = 5;
            let m = manifest(n_hgg, n_lgg);
            let s = make_folds(&m, k, seed).unwrap();
            // Every case in exactly one fold.
            prop_assert_eq!(s.assignments.len(), n_hgg + n_lgg);
            for f in s.assignments.values() {
                prop_assert!(*f < k);
            }
            // Per-fold class counts deviate from proportionality by <= 1.
            for (f, (hgg, lgg)) in class_counts_per_fold(&m, &s).into_iter().enumerate() {
                let _ = f;
                prop_assert!((hgg as f64 - n_hgg as f64 / k as f64).abs() <= 1.0);
                prop_assert!((lgg as f64 - n_lgg as f64 / k as f64).abs() <= 1.0);
            }
            // Train/test are complementary for every fold.
            for f in 0..k {
                let train = s.train_ids(&m, f);
                let test = s.test_ids(&m, f);
                prop_assert_eq!(train.len() + test.len(), m.len());
            }
        }
    }
}
