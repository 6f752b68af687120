//! Rating data: loading, binarisation, positive leave-one-out splitting,
//! and a synthetic low-rank generator.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: rating {rating} outside 1..=5")]
    Rating { line: usize, rating: i64 },
    #[error("no interactions in input")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Format {
    /// `user \t item \t rating \t timestamp`, no header.
    Ml100k,
    /// Comma-separated with header `user,item,rating,timestamp`.
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ml100k" | "tsv" => Ok(Format::Ml100k),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format `{other}` (expected ml100k or csv)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u64,
    pub item: u64,
    pub rating: u8,
    pub timestamp: i64,
}

/// Interactions with dense 0-based ids plus the original ids.
#[derive(Debug, Clone)]
pub struct Ratings {
    pub interactions: Vec<Interaction>,
    /// `user_ids[dense] = raw`
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

impl Ratings {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }
}

/// Parses one `u.data` line; ids are left as in the file.
pub fn parse_ml100k_line(line: &str, line_no: usize) -> Result<Interaction, DataError> {
    let fields: Vec<&str> = line.split('\t').collect();
    parse_fields(&fields, line_no)
}

fn parse_fields(fields: &[&str], line: usize) -> Result<Interaction, DataError> {
    if fields.len() != 4 {
        return Err(DataError::Malformed {
            line,
            msg: format!("expected 4 fields, found {}", fields.len()),
        });
    }
    let num = |i: usize, what: &str| -> Result<i64, DataError> {
        fields[i].trim().parse::<i64>().map_err(|_| DataError::Malformed {
            line,
            msg: format!("{what} `{}` is not an integer", fields[i].trim()),
        })
    };
    let user = num(0, "user")?;
    let item = num(1, "item")?;
    let rating = num(2, "rating")?;
    let timestamp = num(3, "timestamp")?;
    if !(1..=5).contains(&rating) {
        return Err(DataError::Rating { line, rating });
    }
    if user < 0 || item < 0 {
        return Err(DataError::Malformed {
            line,
            msg: "negative id".into(),
        });
    }
    Ok(Interaction {
        user: user as u64,
        item: item as u64,
        rating: rating as u8,
        timestamp,
    })
}

/// Parses text in the given format and remaps ids densely in order of first appearance.
pub fn parse_tabular(text: &str, format: Format) -> Result<Ratings, DataError> {
    let mut raw = Vec::new();
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    if format == Format::Csv {
        match lines.next() {
            Some((_, header)) => {
                let cols: Vec<&str> = header.split(',').map(str::trim).collect();
                if cols != ["user", "item", "rating", "timestamp"] {
                    return Err(DataError::Malformed {
                        line: 1,
                        msg: format!("expected header user,item,rating,timestamp, found `{header}`"),
                    });
                }
            }
            None => return Err(DataError::Empty),
        }
    }
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec = match format {
            Format::Ml100k => parse_ml100k_line(line, no)?,
            Format::Csv => parse_fields(&line.split(',').collect::<Vec<_>>(), no)?,
        };
        raw.push(rec);
    }
    if raw.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(remap(raw))
}

fn remap(raw: Vec<Interaction>) -> Ratings {
    let mut users: HashMap<u64, u64> = HashMap::new();
    let mut items: HashMap<u64, u64> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let interactions = raw
        .into_iter()
        .map(|r| {
            let u = *users.entry(r.user).or_insert_with(|| {
                user_ids.push(r.user);
                user_ids.len() as u64 - 1
            });
            let i = *items.entry(r.item).or_insert_with(|| {
                item_ids.push(r.item);
                item_ids.len() as u64 - 1
            });
            Interaction { user: u, item: i, ..r }
        })
        .collect();
    Ratings {
        interactions,
        user_ids,
        item_ids,
    }
}

pub fn load_tabular(path: impl AsRef<Path>, format: Format) -> Result<Ratings, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_tabular(&text, format)
}

/// A binary-labelled interaction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub user: usize,
    pub item: usize,
    pub label: f64,
    pub timestamp: i64,
}

/// Label 1 for ratings of 4 and 5, else 0.
pub fn binarize(interactions: &[Interaction]) -> Vec<Labeled> {
    interactions
        .iter()
        .map(|r| Labeled {
            user: r.user as usize,
            item: r.item as usize,
            label: if r.rating >= 4 { 1.0 } else { 0.0 },
            timestamp: r.timestamp,
        })
        .collect()
}

/// One training or evaluation example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

impl From<&Labeled> for Example {
    fn from(l: &Labeled) -> Self {
        Self {
            user: l.user,
            item: l.item,
            label: l.label,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitDataset {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub n_users: usize,
    pub n_items: usize,
}

/// Labels of a split, in order.
pub fn labels(examples: &[Example]) -> Vec<f64> {
    examples.iter().map(|e| e.label).collect()
}

/// Minimum interactions for a user to contribute to validation and test.
pub const MIN_INTERACTIONS: usize = 5;

/// Positive leave-one-out split.
///
/// Per user, in timestamp order (stable, so ties keep input order): the last
/// positive and everything after it go to test; the second-to-last positive
/// and everything after it up to the test boundary go to validation; the rest
/// is training data. Users with fewer than [`MIN_INTERACTIONS`] interactions
/// (or no positive) keep everything in train.
pub fn leave_one_out_split(labeled: &[Labeled], n_users: usize, n_items: usize) -> SplitDataset {
    let mut per_user: Vec<Vec<&Labeled>> = vec![Vec::new(); n_users];
    for l in labeled {
        per_user[l.user].push(l);
    }
    let mut out = SplitDataset {
        n_users,
        n_items,
        ..Default::default()
    };
    for seq in &mut per_user {
        seq.sort_by_key(|l| l.timestamp);
        let positives: Vec<usize> = seq
            .iter()
            .enumerate()
            .filter(|(_, l)| l.label >= 0.5)
            .map(|(i, _)| i)
            .collect();
        let (valid_start, test_start) = match positives[..] {
            _ if seq.len() < MIN_INTERACTIONS => (seq.len(), seq.len()),
            [] => (seq.len(), seq.len()),
            [only] => (only, only),
            [.., prev, last] => (prev, last),
        };
        out.train.extend(seq[..valid_start].iter().map(|l| Example::from(*l)));
        out.validation
            .extend(seq[valid_start..test_start].iter().map(|l| Example::from(*l)));
        out.test.extend(seq[test_start..].iter().map(|l| Example::from(*l)));
    }
    out
}

/// Loads, binarises and splits a ratings file.
pub fn load_split(path: impl AsRef<Path>, format: Format) -> Result<SplitDataset, DataError> {
    let ratings = load_tabular(path, format)?;
    let labeled = binarize(&ratings.interactions);
    Ok(leave_one_out_split(&labeled, ratings.n_users(), ratings.n_items()))
}

/// Ground truth behind a synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub median: f64,
    pub labeled: Vec<Labeled>,
}

/// Fully observed `n_users x n_items` interactions with labels from a
/// low-rank score matrix thresholded at its median; each label is flipped
/// with probability `noise`. Each user's items arrive in random order.
pub fn synth_dataset(
    n_users: usize,
    n_items: usize,
    rank: usize,
    noise: f64,
    seed: u64,
) -> Result<SplitDataset, DataError> {
    synth_with_truth(n_users, n_items, rank, noise, seed).map(|(d, _)| d)
}

pub fn synth_with_truth(
    n_users: usize,
    n_items: usize,
    rank: usize,
    noise: f64,
    seed: u64,
) -> Result<(SplitDataset, SynthTruth), DataError> {
    if rank == 0 || rank > n_users.min(n_items) {
        return Err(DataError::Invalid(format!(
            "rank {rank} must be in 1..={}",
            n_users.min(n_items)
        )));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(DataError::Invalid(format!("noise {noise} outside [0, 1]")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut factors = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..rank).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    };
    let user_factors = factors(n_users);
    let item_factors = factors(n_items);
    let score = |u: usize, i: usize| -> f64 {
        user_factors[u]
            .iter()
            .zip(&item_factors[i])
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut all: Vec<f64> = (0..n_users)
        .flat_map(|u| (0..n_items).map(move |i| (u, i)))
        .map(|(u, i)| score(u, i))
        .collect();
    all.sort_by(f64::total_cmp);
    let mid = all.len() / 2;
    let median = if all.len() % 2 == 0 {
        (all[mid - 1] + all[mid]) / 2.0
    } else {
        all[mid]
    };
    let mut labeled = Vec::with_capacity(n_users * n_items);
    let mut order: Vec<usize> = (0..n_items).collect();
    for u in 0..n_users {
        order.shuffle(&mut rng);
        for (t, &i) in order.iter().enumerate() {
            let mut label = score(u, i) > median;
            if rng.gen::<f64>() < noise {
                label = !label;
            }
            labeled.push(Labeled {
                user: u,
                item: i,
                label: if label { 1.0 } else { 0.0 },
                timestamp: t as i64,
            });
        }
    }
    let split = leave_one_out_split(&labeled, n_users, n_items);
    Ok((
        split,
        SynthTruth {
            user_factors,
            item_factors,
            median,
            labeled,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(user: usize, item: usize, label: f64, ts: i64) -> Labeled {
        Labeled {
            user,
            item,
            label,
            timestamp: ts,
        }
    }

    #[test]
    fn parses_a_udata_line() {
        let r = parse_ml100k_line("1\t5\t4\t874965758", 1).unwrap();
        assert_eq!(
            r,
            Interaction {
                user: 1,
                item: 5,
                rating: 4,
                timestamp: 874965758
            }
        );
    }

    #[test]
    fn rejects_bad_rating_and_bad_lines() {
        let err = parse_tabular("1\t2\t3\t4\n1\t5\t7\t9\n", Format::Ml100k).unwrap_err();
        assert!(matches!(err, DataError::Rating { line: 2, rating: 7 }));
        let err = parse_tabular("1\t2\t3\n", Format::Ml100k).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 1, .. }));
        assert!(matches!(parse_tabular("", Format::Ml100k), Err(DataError::Empty)));
        assert!(matches!(
            parse_tabular("user,item,rating,timestamp\n", Format::Csv),
            Err(DataError::Empty)
        ));
    }

    #[test]
    fn csv_and_remapping() {
        let text = "user,item,rating,timestamp\n10,7,5,3\n4,7,2,1\n10,9,4,2\n";
        let r = parse_tabular(text, Format::Csv).unwrap();
        assert_eq!(r.user_ids, vec![10, 4]);
        assert_eq!(r.item_ids, vec![7, 9]);
        assert_eq!(r.interactions[2].user, 0);
        assert_eq!(r.interactions[2].item, 1);
        assert!(parse_tabular("u,i,r,t\n1,2,3,4\n", Format::Csv).is_err());
    }

    #[test]
    fn binarize_threshold() {
        let mk = |rating| Interaction {
            user: 0,
            item: 0,
            rating,
            timestamp: 0,
        };
        let b = binarize(&[mk(4), mk(3), mk(5), mk(1)]);
        let got: Vec<f64> = b.iter().map(|l| l.label).collect();
        assert_eq!(got, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn split_example_sequence() {
        // P1 N1 P2 N2 P3 N3 given out of timestamp order
        let seq = vec![
            lab(0, 5, 1.0, 50),
            lab(0, 0, 1.0, 0),
            lab(0, 1, 0.0, 10),
            lab(0, 3, 0.0, 30),
            lab(0, 2, 1.0, 20),
            lab(0, 6, 0.0, 60),
        ];
        let s = leave_one_out_split(&seq, 1, 7);
        let items = |v: &[Example]| v.iter().map(|e| e.item).collect::<Vec<_>>();
        assert_eq!(items(&s.test), vec![5, 6]);
        assert_eq!(items(&s.validation), vec![2, 3]);
        assert_eq!(items(&s.train), vec![0, 1]);
    }

    #[test]
    fn short_histories_stay_in_train() {
        let seq: Vec<_> = (0..4).map(|t| lab(0, t, 1.0, t as i64)).collect();
        let s = leave_one_out_split(&seq, 1, 4);
        assert_eq!(s.train.len(), 4);
        assert!(s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn positives_only_user() {
        let seq: Vec<_> = (0..6).map(|t| lab(0, t, 1.0, t as i64)).collect();
        let s = leave_one_out_split(&seq, 1, 6);
        assert_eq!(s.test.len(), 1);
        assert_eq!(s.test[0].item, 5);
        assert_eq!(s.validation.len(), 1);
        assert_eq!(s.train.len(), 4);
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let seq = vec![
            lab(0, 0, 0.0, 1),
            lab(0, 1, 1.0, 1),
            lab(0, 2, 0.0, 1),
            lab(0, 3, 1.0, 1),
            lab(0, 4, 0.0, 1),
        ];
        let s = leave_one_out_split(&seq, 1, 5);
        assert_eq!(s.test.iter().map(|e| e.item).collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(s.validation.iter().map(|e| e.item).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_dataset(200, 100, 2, 0.05, 1).unwrap();
        let b = synth_dataset(200, 100, 2, 0.05, 1).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let all: Vec<&Example> = a.train.iter().chain(&a.validation).chain(&a.test).collect();
        assert_eq!(all.len(), 20_000);
        let pos = all.iter().filter(|e| e.label > 0.5).count() as f64 / all.len() as f64;
        assert!((0.4..=0.6).contains(&pos), "{pos}");
        assert!(synth_dataset(5, 5, 6, 0.0, 1).is_err());
    }
}
