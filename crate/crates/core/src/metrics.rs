//! Censoring-aware evaluation: Harrell's concordance index and MAE over
//! uncensored records.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    /// Predicted survival time (normalized units).
    pub predicted: f64,
    pub observed: f64,
    pub event: bool,
}

/// Pair counts behind a concordance index.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConcordanceCounts {
    pub comparable: u64,
    pub concordant: u64,
    pub tied: u64,
}

impl ConcordanceCounts {
    pub fn index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::UndefinedMetric("no comparable pairs for concordance".into()));
        }
        Ok((2 * self.concordant + self.tied) as f64 / (2 * self.comparable) as f64)
    }
}

/// Fenwick tree over prediction ranks.
struct RankCounter {
    tree: Vec<u64>,
}

impl RankCounter {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn insert(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut total = 0;
        while i > 0 {
            total += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// Pair counts in `O(n log n)`: records are swept in decreasing observed
/// time, and each event is compared against every strictly later record
/// through a rank counter over predictions.
pub fn concordance_counts(records: &[EvalRecord]) -> ConcordanceCounts {
    let n = records.len();
    let mut preds: Vec<f64> = records.iter().map(|r| r.predicted).collect();
    preds.sort_by(f64::total_cmp);
    preds.dedup();
    let rank = |x: f64| preds.partition_point(|&p| p < x);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].observed.total_cmp(&records[a].observed));

    let mut later = RankCounter::new(preds.len());
    let mut inserted = 0u64;
    let mut counts = ConcordanceCounts::default();
    let mut start = 0;
    while start < n {
        let t = records[order[start]].observed;
        let mut end = start;
        while end < n && records[order[end]].observed == t {
            end += 1;
        }
        for &i in &order[start..end] {
            let r = &records[i];
            if !r.event {
                continue;
            }
            let k = rank(r.predicted);
            let lower = later.below(k);
            let upto = later.below(k + 1);
            counts.comparable += inserted;
            counts.tied += upto - lower;
            counts.concordant += inserted - upto;
        }
        for &i in &order[start..end] {
            later.insert(rank(records[i].predicted));
            inserted += 1;
        }
        start = end;
    }
    counts
}

/// Harrell's C: a pair with `observed_i < observed_j` is comparable when
/// record `i` is an event, and concordant when `predicted_i < predicted_j`.
/// Prediction ties weigh one half.
pub fn concordance_index(records: &[EvalRecord]) -> Result<f64> {
    concordance_counts(records).index()
}

/// Mean absolute error over uncensored records only.
pub fn mae(records: &[EvalRecord]) -> Result<f64> {
    let (sum, n) = records
        .iter()
        .filter(|r| r.event)
        .fold((0.0, 0usize), |(s, n), r| (s + (r.predicted - r.observed).abs(), n + 1));
    if n == 0 {
        return Err(Error::UndefinedMetric("no uncensored records for MAE".into()));
    }
    Ok(sum / n as f64)
}
