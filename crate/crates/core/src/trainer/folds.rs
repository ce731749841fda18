//! Stratified train/validation/test plans for k-fold cross-validation.
//!
//! Each class is shuffled once with the seeded generator. Per class, subset
//! sizes are the rounded quotas `round(n_c · ratio)` (halves rounded down)
//! for test and validation, with the remainder going to training. Fold `f`
//! takes the `f`-th block of the shuffled class list as its test slides and
//! the block that follows (cyclically) as validation, so test sets never
//! overlap across folds.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Manifest, SubtypeLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub train_ids: BTreeSet<String>,
    pub val_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Nearest integer with exact halves rounded down.
pub fn round_half_down(x: f64) -> usize {
    // 1e-9 absorbs representation error in products such as 30 · 0.15
    (x - 0.5 - 1e-9).ceil().max(0.0) as usize
}

pub fn make_folds(
    manifest: &Manifest,
    n_folds: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<FoldPlan>> {
    let slides: Vec<(String, SubtypeLabel)> = manifest
        .rows
        .iter()
        .map(|r| (r.slide_id.clone(), r.label))
        .collect();
    make_folds_from(&slides, n_folds, ratios, seed)
}

pub fn make_folds_from(
    slides: &[(String, SubtypeLabel)],
    n_folds: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Vec<FoldPlan>> {
    if n_folds == 0 {
        return Err(Error::validation("need at least one fold"));
    }
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(Error::validation("split ratios must be in [0, 1] and sum to 1"));
    }

    let mut plans: Vec<FoldPlan> = (0..n_folds)
        .map(|f| FoldPlan {
            fold_index: f,
            train_ids: BTreeSet::new(),
            val_ids: BTreeSet::new(),
            test_ids: BTreeSet::new(),
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for class in SubtypeLabel::ALL {
        let mut ids: Vec<&str> = slides
            .iter()
            .filter(|(_, l)| *l == class)
            .map(|(id, _)| id.as_str())
            .collect();
        let n = ids.len();
        if n < n_folds {
            return Err(Error::validation(format!(
                "class {class} has {n} slides; {n_folds} folds need at least {n_folds}"
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);

        let n_test = round_half_down(n as f64 * test);
        let n_val = round_half_down(n as f64 * val);
        if n_folds * n_test > n || n_test + n_val > n {
            return Err(Error::validation(format!(
                "class {class}: {n} slides cannot hold {n_folds} disjoint test sets of {n_test} plus {n_val} validation"
            )));
        }
        for (f, plan) in plans.iter_mut().enumerate() {
            let start = f * n_test;
            for (pos, id) in ids.iter().enumerate() {
                let offset = (pos + n - start) % n;
                let set = if offset < n_test {
                    &mut plan.test_ids
                } else if offset < n_test + n_val {
                    &mut plan.val_ids
                } else {
                    &mut plan.train_ids
                };
                set.insert(id.to_string());
            }
        }
    }
    Ok(plans)
}
