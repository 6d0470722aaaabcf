use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng;

pub const NUM_FOLDS: usize = 5;
const TRAIN_FRACTION: f64 = 0.7;

/// Train/validation/test partition for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn kfold_split(ds: &Dataset, seed: u64) -> Result<Vec<FoldSplit>> {
    let ids: Vec<String> = ds.ids().map(String::from).collect();
    kfold_split_ids(&ids, seed)
}

/// Five-fold 70/10/20 split.
///
/// Ids are sorted, then shuffled once. The shuffled list is cut into five
/// contiguous test blocks of `floor(N/5)`, the remainder going one per fold
/// starting at fold 0. For each fold the other ids, read cyclically from the
/// end of its test block, give `round(0.7 N)` training ids (capped so the
/// sizes add up) followed by the validation ids.
pub fn kfold_split_ids(ids: &[String], seed: u64) -> Result<Vec<FoldSplit>> {
    let n = ids.len();
    if n < NUM_FOLDS {
        return Err(Error::invalid(format!(
            "need at least {NUM_FOLDS} images for a {NUM_FOLDS}-fold split, got {n}"
        )));
    }
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    if order.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("image ids must be unique"));
    }
    order.shuffle(&mut rng::stream(seed, "kfold"));

    let base = n / NUM_FOLDS;
    let extra = n % NUM_FOLDS;
    let mut start = 0;
    let mut folds = Vec::with_capacity(NUM_FOLDS);
    for fold in 0..NUM_FOLDS {
        let len = base + usize::from(fold < extra);
        let end = start + len;
        let test: Vec<String> = order[start..end].iter().map(|s| s.to_string()).collect();
        let rest: Vec<String> = order[end..]
            .iter()
            .chain(&order[..start])
            .map(|s| s.to_string())
            .collect();
        let n_train = ((TRAIN_FRACTION * n as f64).round() as usize).min(rest.len());
        let (train, val) = rest.split_at(n_train);
        folds.push(FoldSplit {
            fold,
            train: train.to_vec(),
            val: val.to_vec(),
            test,
        });
        start = end;
    }
    Ok(folds)
}
