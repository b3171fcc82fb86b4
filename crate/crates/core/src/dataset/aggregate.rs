//! Label aggregation for corpora annotated separately per modality.
//!
//! A sample carries a text label and an image label. The pair reduces to a
//! single sentiment: agreement keeps the label, a polarized label paired with
//! `neutral` keeps the polarized label, and opposite polarities discard the
//! sample. Multi-annotator samples first take a per-modality majority vote.

use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Neutral,
    Negative,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Neutral, Polarity::Negative];

    pub fn from_token(token: &str) -> Result<Self, DatasetError> {
        match token {
            "positive" => Ok(Polarity::Positive),
            "neutral" => Ok(Polarity::Neutral),
            "negative" => Ok(Polarity::Negative),
            other => Err(DatasetError::UnknownLabel(other.to_string())),
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Neutral => "neutral",
            Polarity::Negative => "negative",
        }
    }

    /// Class index in the sentiment label space.
    pub fn class_index(self) -> usize {
        self as usize
    }
}

/// Why a sample was discarded during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Text and image labels have opposite polarity.
    PolarityConflict,
    /// Three annotators gave three different labels for one modality.
    NoMajority,
}

impl DropReason {
    pub fn describe(self) -> &'static str {
        match self {
            DropReason::PolarityConflict => "polarity conflict",
            DropReason::NoMajority => "no majority",
        }
    }
}

/// Reduces a (text, image) label pair; `None` means the sample is discarded.
pub fn aggregate_single(text: Polarity, image: Polarity) -> Option<Polarity> {
    use Polarity::*;
    match (text, image) {
        (a, b) if a == b => Some(a),
        (Neutral, p) | (p, Neutral) => Some(p),
        _ => None,
    }
}

/// Reduces three annotators' (text, image) pairs.
pub fn aggregate_multiple(pairs: &[(Polarity, Polarity)]) -> Result<Option<Polarity>, DatasetError> {
    Ok(resolve_multiple(pairs)?.ok())
}

pub(crate) fn resolve_single(text: Polarity, image: Polarity) -> Result<Polarity, DropReason> {
    aggregate_single(text, image).ok_or(DropReason::PolarityConflict)
}

pub(crate) fn resolve_multiple(pairs: &[(Polarity, Polarity)]) -> Result<Result<Polarity, DropReason>, DatasetError> {
    if pairs.len() != 3 {
        return Err(DatasetError::AnnotatorCount(pairs.len()));
    }
    let text = majority(pairs.iter().map(|p| p.0));
    let image = majority(pairs.iter().map(|p| p.1));
    Ok(match (text, image) {
        (Some(t), Some(i)) => resolve_single(t, i),
        _ => Err(DropReason::NoMajority),
    })
}

fn majority(votes: impl Iterator<Item = Polarity>) -> Option<Polarity> {
    let mut counts = [0usize; 3];
    for v in votes {
        counts[v.class_index()] += 1;
    }
    Polarity::ALL.into_iter().find(|p| counts[p.class_index()] >= 2)
}
