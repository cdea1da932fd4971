use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplitError {
    #[error("shots per class must be positive, got {0}")]
    NonPositiveShots(usize),
}

/// k-shot train split with the remaining items halved into val/test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub shots_per_class: usize,
    pub seed: u64,
    /// Classes that had fewer than `shots_per_class` items.
    pub warnings: Vec<String>,
}

/// Draws `min(k, class size)` items per class uniformly without replacement,
/// then splits the remainder 1:1 into validation and test.
pub fn sample_few_shot(labels: &[usize], k: usize, seed: u64) -> Result<FewShotSplit, SplitError> {
    if k == 0 {
        return Err(SplitError::NonPositiveShots(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }

    let mut train = Vec::new();
    let mut rest = Vec::new();
    let mut warnings = Vec::new();
    for (class, mut members) in by_class {
        if members.len() < k {
            warnings.push(format!(
                "class {class} has {} items, fewer than {k} shots; using all",
                members.len()
            ));
        }
        members.shuffle(&mut rng);
        let take = k.min(members.len());
        train.extend_from_slice(&members[..take]);
        rest.extend_from_slice(&members[take..]);
    }
    rest.sort_unstable();
    rest.shuffle(&mut rng);
    let half = rest.len() / 2;
    let mut val = rest[..half].to_vec();
    let mut test = rest[half..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(FewShotSplit {
        train,
        val,
        test,
        shots_per_class: k,
        seed,
        warnings,
    })
}
