//! Stratified train/val/test splits and k-fold plans, plus their on-disk form.
//!
//! File form: a `#split {json}` or `#folds {json}` header line recording the
//! parameters, then one `<part>\t<id>` line per sample, where part is
//! `train`/`val`/`test` or a fold index.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{validate_id, Dataset, DatasetError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    /// Ids outside fold `i`.
    pub fn remainder(&self, i: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }
}

/// Groups ids by label (ascending) and shuffles each group with one seeded
/// stream, visiting classes in label order.
fn shuffled_groups<'a>(items: &[(&'a str, usize)], seed: u64) -> BTreeMap<usize, Vec<&'a str>> {
    let mut groups: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for &(id, label) in items {
        groups.entry(label).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ids in groups.values_mut() {
        ids.shuffle(&mut rng);
    }
    groups
}

fn rounded_share(count: usize, fraction: f64) -> usize {
    (count as f64 * fraction).round() as usize
}

pub fn make_split(dataset: &Dataset, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Split, DatasetError> {
    let valid = |f: f64| f.is_finite() && f > 0.0;
    if !valid(val_fraction) || !valid(test_fraction) || val_fraction + test_fraction >= 1.0 {
        return Err(DatasetError::InvalidParameters(format!(
            "split fractions must be positive with sum < 1 (val {val_fraction}, test {test_fraction})"
        )));
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed,
        val_fraction,
        test_fraction,
    };
    for (label, ids) in shuffled_groups(&dataset.labeled_ids(), seed) {
        let n = ids.len();
        let n_test = rounded_share(n, test_fraction).max(1);
        let n_val = rounded_share(n, val_fraction).max(1);
        if n_test + n_val >= n {
            return Err(DatasetError::ClassTooSmall {
                class: dataset.corpus.class_name(label).to_string(),
                count: n,
            });
        }
        split.test.extend(ids[..n_test].iter().map(|s| s.to_string()));
        split.val.extend(ids[n_test..n_test + n_val].iter().map(|s| s.to_string()));
        split.train.extend(ids[n_test + n_val..].iter().map(|s| s.to_string()));
    }
    Ok(split)
}

/// Stratified carve of a validation subset out of `items`. Classes with a
/// single member stay entirely in the kept part. Returns `(kept, carved)`.
pub fn carve_validation(items: &[(&str, usize)], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut kept = Vec::new();
    let mut carved = Vec::new();
    for ids in shuffled_groups(items, seed).into_values() {
        let n = ids.len();
        let take = rounded_share(n, fraction).clamp(1.min(n - 1), n - 1);
        carved.extend(ids[..take].iter().map(|s| s.to_string()));
        kept.extend(ids[take..].iter().map(|s| s.to_string()));
    }
    (kept, carved)
}

pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan, DatasetError> {
    if k < 2 {
        return Err(DatasetError::InvalidParameters(format!("fold count must be at least 2, got {k}")));
    }
    if k > dataset.len() {
        return Err(DatasetError::InvalidParameters(format!(
            "fold count {k} exceeds dataset size {}",
            dataset.len()
        )));
    }
    for (label, count) in dataset.class_counts().into_iter().enumerate() {
        if count > 0 && count < k {
            log::warn!(
                "class `{}` has {count} samples, fewer than {k} folds",
                dataset.corpus.class_name(label)
            );
        }
    }
    let mut folds = vec![Vec::new(); k];
    let dealt = shuffled_groups(&dataset.labeled_ids(), seed).into_values().flatten();
    for (pos, id) in dealt.enumerate() {
        folds[pos % k].push(id.to_string());
    }
    Ok(FoldPlan { k, seed, folds })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitHeader {
    seed: u64,
    val_fraction: f64,
    test_fraction: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FoldHeader {
    k: usize,
    seed: u64,
}

pub fn write_split(split: &Split) -> String {
    let header = SplitHeader {
        seed: split.seed,
        val_fraction: split.val_fraction,
        test_fraction: split.test_fraction,
    };
    let mut out = format!("#split {}\n", serde_json::to_string(&header).unwrap());
    for (part, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        for id in ids {
            writeln!(out, "{part}\t{id}").unwrap();
        }
    }
    out
}

pub fn write_folds(plan: &FoldPlan) -> String {
    let header = FoldHeader { k: plan.k, seed: plan.seed };
    let mut out = format!("#folds {}\n", serde_json::to_string(&header).unwrap());
    for (i, ids) in plan.folds.iter().enumerate() {
        for id in ids {
            writeln!(out, "{i}\t{id}").unwrap();
        }
    }
    out
}

/// Yields `(line number, part, id)` for every body line, checking uniqueness.
fn body_lines<'a>(
    lines: impl Iterator<Item = (usize, &'a str)>,
) -> Result<Vec<(usize, &'a str, &'a str)>, DatasetError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, raw) in lines {
        if raw.is_empty() {
            continue;
        }
        let (part, id) = raw.split_once('\t').ok_or_else(|| DatasetError::Parse {
            line,
            message: "expected `<part>\\t<id>`".into(),
        })?;
        validate_id(id).map_err(|message| DatasetError::Parse { line, message })?;
        if !seen.insert(id) {
            return Err(DatasetError::DuplicateId(id.to_string()));
        }
        out.push((line, part, id));
    }
    Ok(out)
}

fn header<'a>(input: &'a str, tag: &str) -> Result<(&'a str, impl Iterator<Item = (usize, &'a str)>), DatasetError> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let first = lines.next().map(|(_, l)| l).unwrap_or_default();
    let json = first.strip_prefix(tag).ok_or_else(|| DatasetError::Parse {
        line: 1,
        message: format!("missing `{tag}` header"),
    })?;
    Ok((json, lines))
}

pub fn parse_split(input: &str) -> Result<Split, DatasetError> {
    let (json, lines) = header(input, "#split ")?;
    let h: SplitHeader = serde_json::from_str(json).map_err(|e| DatasetError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed: h.seed,
        val_fraction: h.val_fraction,
        test_fraction: h.test_fraction,
    };
    for (line, part, id) in body_lines(lines)? {
        let target = match part {
            "train" => &mut split.train,
            "val" => &mut split.val,
            "test" => &mut split.test,
            other => {
                return Err(DatasetError::Parse {
                    line,
                    message: format!("unknown split part `{other}`"),
                })
            }
        };
        target.push(id.to_string());
    }
    Ok(split)
}

pub fn parse_folds(input: &str) -> Result<FoldPlan, DatasetError> {
    let (json, lines) = header(input, "#folds ")?;
    let h: FoldHeader = serde_json::from_str(json).map_err(|e| DatasetError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if h.k < 2 || h.k > 1 << 20 {
        return Err(DatasetError::Parse {
            line: 1,
            message: format!("invalid fold count {}", h.k),
        });
    }
    let mut folds = vec![Vec::new(); h.k];
    for (line, part, id) in body_lines(lines)? {
        let idx: usize = part.parse().map_err(|_| DatasetError::Parse {
            line,
            message: format!("bad fold index `{part}`"),
        })?;
        folds
            .get_mut(idx)
            .ok_or_else(|| DatasetError::Parse {
                line,
                message: format!("fold index {idx} out of range for k={}", h.k),
            })?
            .push(id.to_string());
    }
    Ok(FoldPlan {
        k: h.k,
        seed: h.seed,
        folds,
    })
}
