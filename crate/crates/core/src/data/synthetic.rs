use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{Dataset, UserSequence};
use crate::error::{PlrError, Result};
use crate::tensor::RngStream;

/// Planted multi-interest generator. Items are partitioned into equal
/// clusters; each user holds a few clusters and hops between them as a
/// Markov chain. Inside a cluster the next item is either the successor of
/// the previous item in that cluster's order or a Zipf-popular draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interests: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of staying in the active cluster between positions.
    pub persistence: f64,
    /// Probability of emitting the in-cluster successor after a stay.
    pub successor_prob: f64,
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 500,
            n_interests: 4,
            min_len: 10,
            max_len: 20,
            persistence: 0.8,
            successor_prob: 0.5,
            zipf_exponent: 1.0,
            seed: 0,
        }
    }
}

/// The generator's latent state, kept for oracle checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTrace {
    pub item_cluster: Vec<usize>,
    /// Items of each cluster in popularity order.
    pub cluster_items: Vec<Vec<usize>>,
    pub user_clusters: Vec<Vec<usize>>,
    /// Active cluster at every position of every user.
    pub active: Vec<Vec<usize>>,
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PlrError::Config(m));
        if self.n_users == 0 || self.n_items == 0 {
            return bad("n_users and n_items must be positive".into());
        }
        if self.n_interests == 0 || !self.n_items.is_multiple_of(self.n_interests) {
            return bad(format!(
                "n_items {} must be a positive multiple of n_interests {}",
                self.n_items, self.n_interests
            ));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return bad(format!(
                "sequence length range ({}, {}) needs 3 <= min <= max",
                self.min_len, self.max_len
            ));
        }
        if !(0.0..=1.0).contains(&self.persistence) || !(0.0..=1.0).contains(&self.successor_prob) {
            return bad("persistence and successor_prob must lie in [0, 1]".into());
        }
        if !(self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be non-negative".into());
        }
        Ok(())
    }
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(Dataset, SyntheticTrace)> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let mut rng = root.split(0);
    let k = config.n_interests;
    let size = config.n_items / k;

    let mut perm: Vec<usize> = (0..config.n_items).collect();
    rng.shuffle(&mut perm);
    let cluster_items: Vec<Vec<usize>> = perm.chunks(size).map(<[usize]>::to_vec).collect();
    let mut item_cluster = vec![0; config.n_items];
    let mut rank_in_cluster = vec![0; config.n_items];
    for (c, items) in cluster_items.iter().enumerate() {
        for (r, &i) in items.iter().enumerate() {
            item_cluster[i] = c;
            rank_in_cluster[i] = r;
        }
    }
    let zipf = Zipf::new(size as f64, config.zipf_exponent)
        .map_err(|e| PlrError::Config(format!("zipf: {e}")))?;

    let mut users = Vec::with_capacity(config.n_users);
    let mut user_clusters = Vec::with_capacity(config.n_users);
    let mut active_trace = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        let n_held = if k == 1 { 1 } else { 2 + rng.below(k - 1) };
        let mut all: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut all);
        let held = all[..n_held].to_vec();
        let len = config.min_len + rng.below(config.max_len - config.min_len + 1);

        let mut active = held[rng.below(n_held)];
        let mut items = Vec::with_capacity(len);
        let mut actives = Vec::with_capacity(len);
        for pos in 0..len {
            let mut stayed = false;
            if pos > 0 {
                if n_held == 1 || rng.uniform() < config.persistence {
                    stayed = true;
                } else {
                    let others: Vec<usize> =
                        held.iter().copied().filter(|&c| c != active).collect();
                    active = others[rng.below(others.len())];
                }
            }
            let members = &cluster_items[active];
            let item = if stayed && rng.uniform() < config.successor_prob {
                let prev: usize = *items.last().unwrap();
                members[(rank_in_cluster[prev] + 1) % size]
            } else {
                let rank = zipf.sample(&mut rng) as usize;
                members[rank.clamp(1, size) - 1]
            };
            items.push(item);
            actives.push(active);
        }
        users.push(UserSequence {
            user_index: u,
            timestamps: (0..len as i64).collect(),
            items,
        });
        user_clusters.push(held);
        active_trace.push(actives);
    }

    let dataset = Dataset {
        item_ids: (0..config.n_items).map(|j| format!("i{j}")).collect(),
        user_ids: (0..config.n_users).map(|i| format!("u{i}")).collect(),
        users,
        max_len: config.max_len,
        split_labels: Vec::new(),
    };
    let trace = SyntheticTrace {
        item_cluster,
        cluster_items,
        user_clusters,
        active: active_trace,
    };
    Ok((dataset, trace))
}
