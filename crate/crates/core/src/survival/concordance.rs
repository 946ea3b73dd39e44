use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pair counts behind Harrell's C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConcordanceCounts {
    pub concordant: u64,
    pub tied: u64,
    pub comparable: u64,
}

impl ConcordanceCounts {
    /// `(concordant + tied/2) / comparable`; an error when nothing is comparable.
    pub fn index(&self) -> Result<f64> {
        if self.comparable == 0 {
            return Err(Error::Undefined(
                "concordance index has no comparable pairs".into(),
            ));
        }
        Ok((2 * self.concordant + self.tied) as f64 / (2 * self.comparable) as f64)
    }
}

/// Fenwick tree over rank positions.
struct RankCounter(Vec<u64>);

impl RankCounter {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks strictly below `rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Counts comparable pairs `(i, j)` with `t_i < t_j` and `i` uncensored.
///
/// Runs in `O(n log n)`: samples are swept from the latest time backwards while a
/// Fenwick tree over risk ranks holds everyone observed strictly later.
pub fn concordance_counts(theta: &[f64], times: &[f64], events: &[bool]) -> Result<ConcordanceCounts> {
    let n = theta.len();
    if times.len() != n || events.len() != n {
        return Err(Error::shape(
            "concordance inputs",
            n,
            format!("times {} / events {}", times.len(), events.len()),
        ));
    }
    if let Some(i) = theta.iter().chain(times).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("concordance input {i}")));
    }

    let mut levels: Vec<f64> = theta.to_vec();
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    levels.dedup_by(|a, b| a == b);
    let rank = |v: f64| {
        levels
            .binary_search_by(|x| x.partial_cmp(&v).unwrap_or(Ordering::Equal))
            .expect("theta value present in its own level set")
    };
    let ranks: Vec<usize> = theta.iter().map(|&v| rank(v)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut tree = RankCounter::new(levels.len());
    let mut inserted = 0u64;
    let mut counts = ConcordanceCounts::default();
    let mut pos = 0;
    while pos < n {
        let t = times[order[pos]];
        let end = order[pos..]
            .iter()
            .position(|&i| times[i] != t)
            .map_or(n, |o| pos + o);
        for &i in &order[pos..end] {
            if events[i] {
                let below = tree.below(ranks[i]);
                let upto = tree.below(ranks[i] + 1);
                counts.comparable += inserted;
                counts.concordant += below;
                counts.tied += upto - below;
            }
        }
        for &i in &order[pos..end] {
            tree.add(ranks[i]);
            inserted += 1;
        }
        pos = end;
    }
    Ok(counts)
}

/// Harrell's concordance index. Ties in `theta` count one half.
pub fn concordance_index(theta: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    concordance_counts(theta, times, events)?.index()
}
