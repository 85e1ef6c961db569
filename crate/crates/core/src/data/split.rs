use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

/// Number of rotating test folds implied by `train:val:test` ratios.
pub fn fold_count(ratios: [f64; 3]) -> Result<usize> {
    if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let folds = (total / ratios[2]).round() as usize;
    if folds < 2 {
        return Err(Error::Config(format!("test ratio too large in {ratios:?}")));
    }
    Ok(folds)
}

/// Patient-level assignment. Patients are shuffled once by `seed` and cut
/// into equal folds; fold `fold` is the test set and the remaining patients
/// are divided between train and val by their ratio.
pub fn split_patients(n: usize, ratios: [f64; 3], fold: usize, seed: u64) -> Result<Vec<Split>> {
    let folds = fold_count(ratios)?;
    if fold >= folds {
        return Err(Error::Config(format!("fold {fold} out of range for {folds} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (lo, hi) = (fold * n / folds, (fold + 1) * n / folds);
    let rest: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
    let n_val = (rest.len() as f64 * ratios[1] / (ratios[0] + ratios[1])).round() as usize;

    let mut out = vec![Split::Train; n];
    for &i in &order[lo..hi] {
        out[i] = Split::Test;
    }
    for &i in &rest[..n_val] {
        out[i] = Split::Val;
    }
    for s in [Split::Train, Split::Val, Split::Test] {
        if !out.contains(&s) {
            return Err(Error::Config(format!("{n} patients leave the {} split empty", s.name())));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const RATIOS: [f64; 3] = [6.0, 2.0, 2.0];

    #[test]
    fn ten_patients_split_six_two_two() {
        let s = split_patients(10, RATIOS, 0, 1).unwrap();
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));
    }

    #[test]
    fn test_folds_partition_the_cohort() {
        let n = 37;
        let mut seen = vec![0; n];
        for fold in 0..5 {
            for (i, s) in split_patients(n, RATIOS, fold, 9).unwrap().iter().enumerate() {
                if *s == Split::Test {
                    seen[i] += 1;
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(split_patients(n, RATIOS, 5, 9).is_err());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(split_patients(3, RATIOS, 0, 0).is_err());
        assert!(fold_count([1.0, 1.0, 0.0]).is_err());
        assert_eq!(fold_count(RATIOS).unwrap(), 5);
    }
}
