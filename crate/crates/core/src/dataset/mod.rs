//! Image-text corpora: manifest ingestion, label aggregation, splits, folds
//! and presence statistics.

mod aggregate;
mod manifest;
mod split;
mod stats;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aggregate::{aggregate_multiple, aggregate_single, DropReason, Polarity};
pub use manifest::{load_manifest, parse_manifest, write_manifest, DropReport, ManifestRecord};
pub use split::{
    carve_validation, make_folds, make_split, parse_folds, parse_split, write_folds, write_split, FoldPlan, Split,
};
pub use stats::{compute_stats, ClassStats, DatasetStats, PresenceRatios};

use crate::textnorm::{normalize, NormPolicy};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("unknown label token `{0}`")]
    UnknownLabel(String),
    #[error("expected exactly 3 annotator pairs, got {0}")]
    AnnotatorCount(usize),
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("class `{class}` has {count} samples, too few for the requested partition")]
    ClassTooSmall { class: String, count: usize },
    #[error("no feature bundle for sample `{0}`")]
    MissingBundle(String),
    #[error("manifest is not valid UTF-8")]
    InvalidUtf8,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The label space a manifest declares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Corpus {
    /// Three-way sentiment: positive, neutral, negative.
    #[default]
    Mvsa,
    /// Seven emotion classes.
    Tumemo,
}

const EMOTIONS: [&str; 7] = ["angry", "bored", "calm", "fearful", "happy", "loving", "sad"];

impl Corpus {
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Corpus::Mvsa => &["positive", "neutral", "negative"],
            Corpus::Tumemo => &EMOTIONS,
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    pub fn class_index(self, token: &str) -> Result<usize, DatasetError> {
        self.class_names()
            .iter()
            .position(|n| *n == token)
            .ok_or_else(|| DatasetError::UnknownLabel(token.to_string()))
    }

    pub fn class_name(self, index: usize) -> &'static str {
        self.class_names()[index]
    }

    pub fn name(self) -> &'static str {
        match self {
            Corpus::Mvsa => "mvsa",
            Corpus::Tumemo => "tumemo",
        }
    }
}

/// One image-text pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    /// Filled by [`Dataset::normalize_text`]; empty until then.
    pub text_norm: String,
    pub image_ref: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    pub samples: Vec<Sample>,
    pub drops: DropReport,
}

impl Dataset {
    /// Builds a dataset, enforcing id uniqueness and label range.
    pub fn new(corpus: Corpus, samples: Vec<Sample>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(samples.len());
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateId(s.id.clone()));
            }
            if s.label >= corpus.num_classes() {
                return Err(DatasetError::InvalidParameters(format!(
                    "sample `{}` has label {} outside 0..{}",
                    s.id,
                    s.label,
                    corpus.num_classes()
                )));
            }
        }
        Ok(Self {
            corpus,
            samples,
            drops: DropReport::default(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.corpus.num_classes()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().map(|s| s.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    /// `(id, label)` view used by the partitioning functions.
    pub fn labeled_ids(&self) -> Vec<(&str, usize)> {
        self.samples.iter().map(|s| (s.id.as_str(), s.label)).collect()
    }

    pub fn normalize_text(&mut self, policy: &NormPolicy) {
        for s in &mut self.samples {
            s.text_norm = normalize(&s.text, policy);
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Sample ids become line-oriented file keys; reject anything that would
/// break that.
pub(crate) fn validate_id(id: &str) -> Result<(), String> {
    if id.is_empty() {
        return Err("empty sample id".into());
    }
    if id.chars().any(char::is_control) {
        return Err(format!("sample id {id:?} contains control characters"));
    }
    Ok(())
}
