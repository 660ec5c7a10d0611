use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dwi::Label;
use crate::error::{Error, Result};

pub const FOLDS: usize = 5;
pub const MIN_CASES: usize = 10;

/// Stratified 5-fold plan. Cases are dealt into five parts; fold `k` tests
/// on part `k`, validates on part `k + 1`, and trains on the other three.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// Part index of every case, in the order the labels were given.
    pub parts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn folds(&self) -> usize {
        FOLDS
    }

    fn members(&self, part: usize) -> Vec<usize> {
        (0..self.parts.len()).filter(|&i| self.parts[i] == part).collect()
    }

    pub fn fold(&self, k: usize) -> Fold {
        let val_part = (k + 1) % FOLDS;
        let train = (0..self.parts.len()).filter(|&i| self.parts[i] != k && self.parts[i] != val_part).collect();
        Fold { train, validation: self.members(val_part), test: self.members(k) }
    }
}

/// Each class is shuffled by the seed and dealt round-robin, continuing the
/// deal across classes, so every part gets within one case of a fifth.
pub fn make_splits(labels: &[Label], seed: u64) -> Result<SplitPlan> {
    if labels.len() < MIN_CASES {
        return Err(Error::TooFewCases { required: MIN_CASES, got: labels.len() });
    }
    if !labels.iter().any(|l| l.is_positive()) || labels.iter().all(|l| l.is_positive()) {
        return Err(Error::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = vec![0; labels.len()];
    let mut deal = 0usize;
    for class in [Label::Benign, Label::Malignant] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            parts[i] = deal % FOLDS;
            deal += 1;
        }
    }
    Ok(SplitPlan { seed, parts })
}
