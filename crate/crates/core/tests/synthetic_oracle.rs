//! A predictor that knows the generator's active cluster must beat random
//! ranking by a wide margin, or the planted structure is not learnable.

use plr_core::data::{
    chronological_split, generate_synthetic, Split, SyntheticConfig, SyntheticTrace,
};

/// Successor of the previous item when it shares the active cluster, then
/// the cluster's most popular items.
fn oracle_top_k(trace: &SyntheticTrace, prev: usize, cluster: usize, k: usize) -> Vec<usize> {
    let members = &trace.cluster_items[cluster];
    let mut out = Vec::with_capacity(k);
    if trace.item_cluster[prev] == cluster {
        let r = members.iter().position(|&i| i == prev).unwrap();
        out.push(members[(r + 1) % members.len()]);
    }
    for &i in members {
        if out.len() == k {
            break;
        }
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

#[test]
fn cluster_oracle_beats_random_threefold() {
    let cfg = SyntheticConfig {
        n_users: 2000,
        n_items: 500,
        n_interests: 4,
        seed: 11,
        ..Default::default()
    };
    let (ds, trace) = generate_synthetic(&cfg).unwrap();
    let (split, excluded) = chronological_split(&ds);
    assert_eq!(excluded, 0);
    let test = split.eval_samples(Split::Test).unwrap();
    let hits = test
        .iter()
        .filter(|s| {
            let pos = s.context.len();
            let top = oracle_top_k(
                &trace,
                *s.context.last().unwrap(),
                trace.active[s.user][pos],
                10,
            );
            top.contains(&s.target)
        })
        .count();
    let recall = hits as f64 / test.len() as f64;
    let random = 10.0 / 500.0;
    println!("cluster oracle recall@10 = {recall:.4} (random {random:.4})");
    assert!(recall >= 3.0 * random, "{recall}");
}
