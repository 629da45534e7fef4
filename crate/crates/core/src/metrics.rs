//! Full-catalog ranking metrics for a single held-out target per user.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
pub const MRR_K: usize = 20;

/// 1-based rank of `row[target]`. Items scoring equal to the target are
/// ranked ahead of it.
pub fn rank_of_target<T: PartialOrd + Copy>(row: &[T], target: usize) -> usize {
    let s = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != target && v >= s)
        .count()
}

/// Running sums that merge associatively across shards.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    ks: Vec<usize>,
    hits: Vec<f64>,
    gains: Vec<f64>,
    reciprocal: f64,
    users: usize,
}

impl MetricsAccumulator {
    pub fn new(ks: &[usize]) -> Self {
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        Self {
            hits: vec![0.0; ks.len()],
            gains: vec![0.0; ks.len()],
            ks,
            reciprocal: 0.0,
            users: 0,
        }
    }

    pub fn push(&mut self, rank: usize) {
        for (i, &k) in self.ks.iter().enumerate() {
            if rank <= k {
                self.hits[i] += 1.0;
                self.gains[i] += 1.0 / ((rank + 1) as f64).log2();
            }
        }
        if rank <= MRR_K {
            self.reciprocal += 1.0 / rank as f64;
        }
        self.users += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(
            self.ks, other.ks,
            "merging accumulators over different K lists"
        );
        for i in 0..self.ks.len() {
            self.hits[i] += other.hits[i];
            self.gains[i] += other.gains[i];
        }
        self.reciprocal += other.reciprocal;
        self.users += other.users;
    }

    pub fn finish(&self) -> MetricsReport {
        let n = self.users.max(1) as f64;
        MetricsReport {
            hr: self
                .ks
                .iter()
                .zip(&self.hits)
                .map(|(&k, &h)| (k, h / n))
                .collect(),
            ndcg: self
                .ks
                .iter()
                .zip(&self.gains)
                .map(|(&k, &g)| (k, g / n))
                .collect(),
            mrr: self.reciprocal / n,
            users: self.users,
        }
    }
}

/// HR and NDCG per cutoff, MRR at 20.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub users: usize,
}

impl MetricsReport {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.get(&k).copied()
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.get(&k).copied()
    }

    /// Flat object: `{"hr@5": .., "ndcg@5": .., "mrr@20": .., "users": N}`.
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (k, v) in &self.hr {
            map.insert(format!("hr@{k}"), Value::from(*v));
        }
        for (k, v) in &self.ndcg {
            map.insert(format!("ndcg@{k}"), Value::from(*v));
        }
        map.insert(format!("mrr@{MRR_K}"), Value::from(self.mrr));
        map.insert("users".into(), Value::from(self.users));
        Value::Object(map)
    }
}

/// Metrics from a list of ranks.
pub fn accumulate(ranks: &[usize], ks: &[usize]) -> MetricsReport {
    let mut acc = MetricsAccumulator::new(ks);
    ranks.iter().for_each(|&r| acc.push(r));
    acc.finish()
}
