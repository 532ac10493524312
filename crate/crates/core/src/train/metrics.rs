//! Full-ranking Recall@K and NDCG@K with a single relevant item.

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{PlrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub users: usize,
    pub metrics: Vec<CutoffMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<Vec<usize>>,
    pub runtime_seconds: f64,
}

impl MetricsReport {
    pub fn at(&self, k: usize) -> Option<&CutoffMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.at(k).map_or(f64::NAN, |m| m.ndcg)
    }

    /// Aligned-column rendering for terminals.
    pub fn table(&self) -> String {
        let mut s = format!("{:>6} {:>10} {:>10}\n", "K", "Recall", "NDCG");
        for m in &self.metrics {
            s.push_str(&format!("{:>6} {:>10.6} {:>10.6}\n", m.k, m.recall, m.ndcg));
        }
        s
    }
}

/// 1-based rank of `target`; items scoring higher, or scoring equal with a
/// lower index, rank ahead of it.
pub fn rank_of(scores: &[f32], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < target))
        .count()
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn metrics_from_ranks(ranks: &[usize], ks: &[usize], split: Split) -> Result<MetricsReport> {
    if ranks.is_empty() {
        return Err(PlrError::Data(format!("no users to evaluate on {split:?}")));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(PlrError::Config(
            "cutoffs must be a nonempty list of positive K".into(),
        ));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let n = ranks.len() as f64;
    let metrics = ks
        .iter()
        .map(|&k| CutoffMetrics {
            k,
            recall: ranks.iter().filter(|&&r| r <= k).count() as f64 / n,
            ndcg: ranks.iter().map(|&r| ndcg_at(r, k)).sum::<f64>() / n,
        })
        .collect();
    Ok(MetricsReport {
        split: format!("{split:?}").to_lowercase(),
        users: ranks.len(),
        metrics,
        ranks: None,
        runtime_seconds: 0.0,
    })
}
