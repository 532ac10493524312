//! Interaction logs, per-user sequences, leave-one-out splits, and the
//! sample builders that feed training and evaluation.

mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{PlrError, Result};
use crate::tensor::RngStream;

pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticTrace};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub rating: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = PlrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(PlrError::Input(format!(
                "unknown split `{other}`, expected train, valid or test"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_index: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Dense index -> original item id.
    pub item_ids: Vec<String>,
    /// Dense index -> original user id.
    pub user_ids: Vec<String>,
    pub users: Vec<UserSequence>,
    pub max_len: usize,
    /// Per user, per position. Empty until `chronological_split` runs.
    pub split_labels: Vec<Vec<Split>>,
}

/// One (context, next item) example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub user: usize,
    pub context: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub sparsity: f64,
}

fn parse_line(line: &str, lineno: usize) -> Result<InteractionRecord> {
    let err = |message: String| PlrError::Parse {
        line: lineno,
        message,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if !(3..=4).contains(&fields.len()) {
        return Err(err(format!(
            "expected 3 or 4 tab-separated fields, found {}",
            fields.len()
        )));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err(err("empty user or item id".into()));
    }
    let timestamp: i64 = fields[2]
        .trim()
        .parse()
        .map_err(|_| err(format!("timestamp `{}` is not an integer", fields[2])))?;
    if timestamp < 0 {
        return Err(err(format!("negative timestamp {timestamp}")));
    }
    let rating = match fields.get(3).map(|s| s.trim()) {
        None | Some("") => None,
        Some(r) => {
            let v: u8 = r
                .parse()
                .map_err(|_| err(format!("rating `{r}` is not an integer")))?;
            if !(1..=5).contains(&v) {
                return Err(err(format!("rating {v} outside 1..=5")));
            }
            Some(v)
        }
    };
    Ok(InteractionRecord {
        user_id: fields[0].to_string(),
        item_id: fields[1].to_string(),
        timestamp,
        rating,
    })
}

/// Parses TSV interactions, dropping rated records at or below the
/// positive threshold. Records without a rating are implicit positives.
pub fn parse_interactions(
    reader: impl Read,
    positive_threshold: u8,
) -> Result<Vec<InteractionRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(line, i + 1)?;
        if record.rating.is_some_and(|r| r <= positive_threshold) {
            continue;
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_interactions(path: &Path, positive_threshold: u8) -> Result<Vec<InteractionRecord>> {
    parse_interactions(fs::File::open(path)?, positive_threshold)
}

pub fn write_interactions(records: &[InteractionRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        match r.rating {
            Some(v) => writeln!(out, "{}\t{}\t{}\t{}", r.user_id, r.item_id, r.timestamp, v)?,
            None => writeln!(out, "{}\t{}\t{}", r.user_id, r.item_id, r.timestamp)?,
        }
    }
    Ok(())
}

/// Groups records per user, sorts each user chronologically (stable, so
/// equal timestamps keep input order), drops short users, keeps the most
/// recent `max_len` events, and indexes users and items in order of first
/// appearance among the surviving events.
pub fn build_sequences(
    records: &[InteractionRecord],
    min_interactions: usize,
    max_len: usize,
) -> Result<Dataset> {
    if min_interactions < 2 {
        return Err(PlrError::Config(
            "min_interactions must be at least 2".into(),
        ));
    }
    if max_len < min_interactions {
        // truncation would otherwise push kept users back under the filter
        return Err(PlrError::Config(format!(
            "max_len {max_len} is below min_interactions {min_interactions}"
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut per_user: HashMap<&str, Vec<&InteractionRecord>> = HashMap::new();
    for r in records {
        per_user
            .entry(r.user_id.as_str())
            .or_insert_with(|| {
                order.push(r.user_id.as_str());
                Vec::new()
            })
            .push(r);
    }

    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut item_ids = Vec::new();
    let mut user_ids = Vec::new();
    let mut users = Vec::new();
    for user in order {
        let mut events = per_user.remove(user).unwrap_or_default();
        if events.len() < min_interactions {
            continue;
        }
        events.sort_by_key(|r| r.timestamp);
        let keep = &events[events.len().saturating_sub(max_len)..];
        let mut items = Vec::with_capacity(keep.len());
        for r in keep {
            let next = item_index.len();
            let idx = *item_index.entry(r.item_id.as_str()).or_insert_with(|| {
                item_ids.push(r.item_id.clone());
                next
            });
            items.push(idx);
        }
        users.push(UserSequence {
            user_index: users.len(),
            items,
            timestamps: keep.iter().map(|r| r.timestamp).collect(),
        });
        user_ids.push(user.to_string());
    }
    if users.is_empty() {
        return Err(PlrError::Data(format!(
            "no user has at least {min_interactions} interactions"
        )));
    }
    Ok(Dataset {
        item_ids,
        user_ids,
        users,
        max_len,
        split_labels: Vec::new(),
    })
}

/// Leave-one-out labels: last position test, penultimate valid, the rest
/// train. Users shorter than three events are dropped; the count is returned.
pub fn chronological_split(dataset: &Dataset) -> (Dataset, usize) {
    let mut out = dataset.clone();
    let keep: Vec<bool> = dataset.users.iter().map(|u| u.len() >= 3).collect();
    let excluded = keep.iter().filter(|k| !**k).count();
    if excluded > 0 {
        warn!("{excluded} users with fewer than 3 events excluded from the split");
    }
    let mut it = keep.iter();
    out.users.retain(|_| *it.next().unwrap());
    let mut it = keep.iter();
    out.user_ids.retain(|_| *it.next().unwrap());
    for (i, u) in out.users.iter_mut().enumerate() {
        u.user_index = i;
    }
    out.split_labels = out
        .users
        .iter()
        .map(|u| {
            let n = u.len();
            (0..n)
                .map(|j| match n - j {
                    1 => Split::Test,
                    2 => Split::Valid,
                    _ => Split::Train,
                })
                .collect()
        })
        .collect();
    (out, excluded)
}

impl Dataset {
    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn is_split(&self) -> bool {
        !self.users.is_empty() && self.split_labels.len() == self.users.len()
    }

    /// Back to records, one per event, users in dataset order.
    pub fn to_records(&self) -> Vec<InteractionRecord> {
        self.users
            .iter()
            .flat_map(|u| {
                u.items
                    .iter()
                    .zip(&u.timestamps)
                    .map(|(&i, &t)| InteractionRecord {
                        user_id: self.user_ids[u.user_index].clone(),
                        item_id: self.item_ids[i].clone(),
                        timestamp: t,
                        rating: None,
                    })
            })
            .collect()
    }

    pub fn stats(&self) -> DatasetStats {
        let interactions: usize = self.users.iter().map(|u| u.len()).sum();
        let cells = (self.num_users() * self.num_items()).max(1) as f64;
        DatasetStats {
            users: self.num_users(),
            items: self.num_items(),
            interactions,
            avg_length: interactions as f64 / self.num_users().max(1) as f64,
            sparsity: 1.0 - interactions as f64 / cells,
        }
    }

    fn require_split(&self) -> Result<()> {
        if self.is_split() {
            Ok(())
        } else {
            Err(PlrError::State("dataset has no split labels".into()))
        }
    }

    /// Next-item pairs whose target lies in the train region and whose
    /// context is non-empty, most recent first, at most `per_user_cap` per
    /// user (`0` means no cap). Users are visited in index order.
    pub fn train_samples(&self, per_user_cap: usize) -> Result<Vec<Sample>> {
        self.require_split()?;
        let mut out = Vec::new();
        for (u, labels) in self.users.iter().zip(&self.split_labels) {
            let train_end = labels.iter().take_while(|l| **l == Split::Train).count();
            let mut targets: Vec<usize> = (1..train_end).rev().collect();
            if per_user_cap > 0 {
                targets.truncate(per_user_cap);
            }
            for j in targets {
                out.push(Sample {
                    user: u.user_index,
                    context: u.items[..j].to_vec(),
                    target: u.items[j],
                });
            }
        }
        Ok(out)
    }

    /// One sample per user: the labeled target and everything before it.
    pub fn eval_samples(&self, split: Split) -> Result<Vec<Sample>> {
        self.require_split()?;
        if split == Split::Train {
            return Err(PlrError::Input(
                "evaluation needs the valid or test split".into(),
            ));
        }
        let mut out = Vec::new();
        for (u, labels) in self.users.iter().zip(&self.split_labels) {
            if let Some(j) = labels.iter().position(|l| *l == split) {
                if j == 0 {
                    continue;
                }
                out.push(Sample {
                    user: u.user_index,
                    context: u.items[..j].to_vec(),
                    target: u.items[j],
                });
            }
        }
        if out.is_empty() {
            return Err(PlrError::Data(format!("split {split:?} has no targets")));
        }
        Ok(out)
    }
}

/// Removes each train-labeled position independently with probability
/// `rate`. Valid and test targets are never touched, the vocabulary is
/// unchanged, and users left with fewer than two context items are kept
/// (the count is returned).
pub fn perturb_missing(dataset: &Dataset, rate: f64, seed: u64) -> Result<(Dataset, usize)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PlrError::Config(format!(
            "removal rate {rate} outside [0, 1)"
        )));
    }
    dataset.require_split()?;
    if rate == 0.0 {
        return Ok((dataset.clone(), 0));
    }
    let mut rng = RngStream::new(seed);
    let mut out = dataset.clone();
    let mut short = 0;
    for (u, labels) in out.users.iter_mut().zip(out.split_labels.iter_mut()) {
        let mut items = Vec::with_capacity(u.len());
        let mut times = Vec::with_capacity(u.len());
        let mut kept = Vec::with_capacity(u.len());
        for j in 0..u.len() {
            if labels[j] == Split::Train && rng.uniform() < rate {
                continue;
            }
            items.push(u.items[j]);
            times.push(u.timestamps[j]);
            kept.push(labels[j]);
        }
        let context = kept.iter().filter(|l| **l == Split::Train).count();
        if context < 2 {
            short += 1;
        }
        u.items = items;
        u.timestamps = times;
        *labels = kept;
    }
    if short > 0 {
        warn!("{short} users have fewer than 2 context items after perturbation");
    }
    Ok((out, short))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(u: &str, i: &str, t: i64) -> InteractionRecord {
        InteractionRecord {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: t,
            rating: None,
        }
    }

    #[test]
    fn positive_threshold_filter() {
        let text = "u1\ti9\t100\t5\nu1\ti9\t100\t2\n\nu2\ti3\t7\n";
        let r = parse_interactions(text.as_bytes(), 3).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].rating, Some(5));
        assert_eq!(r[1].rating, None);
        assert!(parse_interactions("".as_bytes(), 3).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "u1\ti1\t1\nu1\ti2\tabc\n";
        match parse_interactions(text.as_bytes(), 3).unwrap_err() {
            PlrError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(parse_interactions("u1\ti1\t-4\n".as_bytes(), 3).is_err());
        assert!(parse_interactions("u1 i1 4\n".as_bytes(), 3).is_err());
    }

    #[test]
    fn min_filter_and_truncation() {
        let mut records: Vec<_> = (0..9).map(|t| rec("short", &format!("a{t}"), t)).collect();
        records.extend((0..60).map(|t| rec("long", &format!("b{t}"), t)));
        let ds = build_sequences(&records, 10, 50).unwrap();
        assert_eq!(ds.user_ids, vec!["long".to_string()]);
        let kept: Vec<&str> = ds.users[0]
            .items
            .iter()
            .map(|&i| ds.item_ids[i].as_str())
            .collect();
        let expected: Vec<String> = (10..60).map(|t| format!("b{t}")).collect();
        assert_eq!(kept, expected);
        assert_eq!(ds.num_items(), 50);
    }

    #[test]
    fn equal_timestamps_keep_input_order() {
        let records = vec![rec("u", "x", 5), rec("u", "y", 5), rec("u", "z", 1)];
        let ds = build_sequences(&records, 2, 10).unwrap();
        let names: Vec<&str> = ds.users[0]
            .items
            .iter()
            .map(|&i| ds.item_ids[i].as_str())
            .collect();
        assert_eq!(names, ["z", "x", "y"]);
    }

    #[test]
    fn zero_survivors_is_an_error() {
        let records = vec![rec("u", "x", 1)];
        assert!(matches!(
            build_sequences(&records, 2, 10),
            Err(PlrError::Data(_))
        ));
    }

    #[test]
    fn leave_one_out_labels() {
        let records: Vec<_> = ["a", "b", "c", "d"]
            .iter()
            .enumerate()
            .map(|(t, i)| rec("u", i, t as i64))
            .collect();
        let (ds, excluded) = chronological_split(&build_sequences(&records, 2, 10).unwrap());
        assert_eq!(excluded, 0);
        assert_eq!(
            ds.split_labels[0],
            [Split::Train, Split::Train, Split::Valid, Split::Test]
        );
        let train = ds.train_samples(0).unwrap();
        assert_eq!(
            train,
            vec![Sample {
                user: 0,
                context: vec![0],
                target: 1
            }]
        );
        let valid = ds.eval_samples(Split::Valid).unwrap();
        assert_eq!((valid[0].context.clone(), valid[0].target), (vec![0, 1], 2));
        let test = ds.eval_samples(Split::Test).unwrap();
        assert_eq!(
            (test[0].context.clone(), test[0].target),
            (vec![0, 1, 2], 3)
        );
    }

    #[test]
    fn length_three_users_give_valid_and_test_only() {
        let records: Vec<_> = ["a", "b", "c"]
            .iter()
            .enumerate()
            .map(|(t, i)| rec("u", i, t as i64))
            .collect();
        let (ds, _) = chronological_split(&build_sequences(&records, 2, 10).unwrap());
        assert!(ds.train_samples(0).unwrap().is_empty());
        assert_eq!(ds.eval_samples(Split::Valid).unwrap()[0].target, 1);
        assert_eq!(ds.eval_samples(Split::Test).unwrap()[0].target, 2);
    }

    #[test]
    fn short_users_are_excluded_with_count() {
        let records = vec![
            rec("a", "x", 1),
            rec("a", "y", 2),
            rec("b", "x", 1),
            rec("b", "y", 2),
            rec("b", "z", 3),
        ];
        let (ds, excluded) = chronological_split(&build_sequences(&records, 2, 10).unwrap());
        assert_eq!(excluded, 1);
        assert_eq!(ds.user_ids, vec!["b".to_string()]);
        assert_eq!(ds.users[0].user_index, 0);
    }

    #[test]
    fn train_cap_keeps_most_recent() {
        let records: Vec<_> = (0..20).map(|t| rec("u", &format!("i{t}"), t)).collect();
        let (ds, _) = chronological_split(&build_sequences(&records, 2, 50).unwrap());
        let s = ds.train_samples(8).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s[0].target, 17);
        assert_eq!(s[7].target, 10);
    }

    fn split_dataset(users: usize, len: usize) -> Dataset {
        let records: Vec<_> = (0..users)
            .flat_map(|u| {
                (0..len).map(move |t| {
                    rec(
                        &format!("u{u}"),
                        &format!("i{}", (u * 7 + t) % 40),
                        t as i64,
                    )
                })
            })
            .collect();
        chronological_split(&build_sequences(&records, 2, len).unwrap()).0
    }

    #[test]
    fn perturbation_rate_concentrates() {
        // 10^4 removable positions: 500 users x 20 train positions each
        let ds = split_dataset(500, 22);
        let (p, _) = perturb_missing(&ds, 0.3, 17).unwrap();
        let before: usize = ds.users.iter().map(|u| u.len()).sum();
        let after: usize = p.users.iter().map(|u| u.len()).sum();
        let removed = (before - after) as f64 / 10_000.0;
        assert!((removed - 0.3).abs() <= 0.02, "{removed}");
        for (a, b) in ds
            .eval_samples(Split::Test)
            .unwrap()
            .iter()
            .zip(p.eval_samples(Split::Test).unwrap())
        {
            assert_eq!(a.target, b.target);
        }
        for (a, b) in ds
            .eval_samples(Split::Valid)
            .unwrap()
            .iter()
            .zip(p.eval_samples(Split::Valid).unwrap())
        {
            assert_eq!(a.target, b.target);
        }
        assert_eq!(p.item_ids, ds.item_ids);
    }

    #[test]
    fn zero_rate_is_identity_and_bad_rate_rejected() {
        let ds = split_dataset(5, 6);
        assert_eq!(perturb_missing(&ds, 0.0, 1).unwrap().0, ds);
        assert!(perturb_missing(&ds, 1.0, 1).is_err());
        assert!(perturb_missing(&ds, -0.1, 1).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let records = vec![
            rec("u", "x", 3),
            InteractionRecord {
                rating: Some(4),
                ..rec("v", "y", 9)
            },
        ];
        let mut buf = Vec::new();
        write_interactions(&records, &mut buf).unwrap();
        assert_eq!(parse_interactions(buf.as_slice(), 3).unwrap(), records);
    }

    proptest! {
        #[test]
        fn build_sequences_is_idempotent(
            events in prop::collection::vec((0usize..6, 0usize..15, 0i64..20), 1..120),
            min in 2usize..5,
            extra in 0usize..8,
        ) {
            let records: Vec<_> = events.iter().map(|(u, i, t)| rec(&format!("u{u}"), &format!("i{i}"), *t)).collect();
            let max_len = min + extra;
            if let Ok(ds) = build_sequences(&records, min, max_len) {
                let again = build_sequences(&ds.to_records(), min, max_len).unwrap();
                prop_assert_eq!(&again, &ds);
                for u in &ds.users {
                    prop_assert!(u.timestamps.windows(2).all(|w| w[0] <= w[1]));
                    prop_assert!(u.len() >= min && u.len() <= max_len);
                    prop_assert!(u.items.iter().all(|&i| i < ds.num_items()));
                }
            }
        }

        #[test]
        fn split_partitions_targets(lens in prop::collection::vec(3usize..12, 1..20)) {
            let records: Vec<_> = lens.iter().enumerate()
                .flat_map(|(u, &n)| (0..n).map(move |t| rec(&format!("u{u}"), &format!("i{t}"), t as i64)))
                .collect();
            let (ds, _) = chronological_split(&build_sequences(&records, 2, 50).unwrap());
            let train = ds.train_samples(0).unwrap();
            let valid = ds.eval_samples(Split::Valid).unwrap();
            let test = ds.eval_samples(Split::Test).unwrap();
            let mut seen = std::collections::HashSet::new();
            for s in train.iter().chain(&valid).chain(&test) {
                prop_assert!(seen.insert((s.user, s.context.len())));
            }
            for (u, t) in ds.users.iter().zip(&test) {
                prop_assert_eq!(t.target, *u.items.last().unwrap());
            }
        }
    }
}
