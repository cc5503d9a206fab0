//! k-fold plans with rotating train / validation / test roles.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PrescriptionRecord;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Record indices per fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

/// Index sets for one cross-validation iteration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub iteration: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle followed by round-robin assignment to `k` folds.
pub fn make_folds(records: &[PrescriptionRecord], k: usize, seed: u64) -> Result<FoldPlan> {
    plan_indices(records.len(), k, seed)
}

pub fn plan_indices(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 3 {
        return Err(Error::Config(format!("need at least 3 folds, got {k}")));
    }
    if n < k {
        return Err(Error::Data(format!("{n} records cannot fill {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Folds));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    Ok(FoldPlan { folds })
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// Iteration `i`: fold `i` tests, fold `i+1 (mod k)` validates, the rest train.
    pub fn split(&self, iteration: usize) -> Result<Split> {
        let k = self.k();
        if iteration >= k {
            return Err(Error::Contract(format!("iteration {iteration} outside 0..{k}")));
        }
        let val_fold = (iteration + 1) % k;
        let mut train = Vec::new();
        for (f, idx) in self.folds.iter().enumerate() {
            if f != iteration && f != val_fold {
                train.extend_from_slice(idx);
            }
        }
        let split = Split {
            iteration,
            train,
            validation: self.folds[val_fold].clone(),
            test: self.folds[iteration].clone(),
        };
        split.assert_disjoint()?;
        Ok(split)
    }
}

impl Split {
    /// Fails if any record appears in more than one role.
    pub fn assert_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &i in self.train.iter().chain(&self.validation).chain(&self.test) {
            if !seen.insert(i) {
                return Err(Error::Contract(format!(
                    "record {i} appears in more than one role in iteration {}",
                    self.iteration
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_records_five_folds() {
        let plan = plan_indices(10, 5, 1).unwrap();
        assert!(plan.folds.iter().all(|f| f.len() == 2));
    }

    #[test]
    fn folds_partition_and_balance() {
        let plan = plan_indices(23, 5, 9).unwrap();
        let mut all: Vec<usize> = plan.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn seeded_plans_repeat() {
        assert_eq!(plan_indices(40, 5, 3).unwrap(), plan_indices(40, 5, 3).unwrap());
        assert_ne!(plan_indices(40, 5, 3).unwrap(), plan_indices(40, 5, 4).unwrap());
    }

    #[test]
    fn every_fold_tests_once() {
        let plan = plan_indices(30, 5, 0).unwrap();
        let mut tested = Vec::new();
        for it in 0..5 {
            let s = plan.split(it).unwrap();
            assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 30);
            assert_eq!(s.train.len(), 18);
            tested.extend(s.test);
        }
        tested.sort_unstable();
        assert_eq!(tested, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn too_few_records() {
        assert!(matches!(plan_indices(4, 5, 0), Err(Error::Data(_))));
    }

    #[test]
    fn leakage_is_detected() {
        let s = Split {
            iteration: 0,
            train: vec![0, 1],
            validation: vec![2],
            test: vec![1],
        };
        assert!(s.assert_disjoint().is_err());
    }
}
