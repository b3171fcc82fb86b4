//! Post-processing rules that turn raw expert-model outputs into features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::stub::SentenceEncoder;
use super::{BranchId, FeatureRecord};

/// Scene classifier output width.
pub const SCENE_CLASSES: usize = 365;
/// OCR features are only extracted when at least this many words were read.
pub const OCR_MIN_WORDS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum ExpertError {
    #[error("face box {index} has non-positive size {width}x{height}")]
    NonPositiveBox { index: usize, width: f32, height: f32 },
    #[error("detection {index} has {got} logits, expected {expected}")]
    LengthMismatch { index: usize, expected: usize, got: usize },
    #[error("scene logits have length {0}, expected {SCENE_CLASSES}")]
    SceneLength(usize),
    #[error("non-finite value in expert output")]
    NonFinite,
    #[error("sentence encoder failed: {0}")]
    Encoder(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f32,
    pub y: f32,
    pub width: f32,
    pub height: f32,
}

impl BoundingBox {
    pub fn area(&self) -> f32 {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceDetection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub embedding: Vec<f32>,
}

/// Embedding of the largest face; ties go to the earliest detection.
pub fn select_largest_face(detections: &[FaceDetection]) -> Result<Option<&[f32]>, ExpertError> {
    let mut best: Option<(usize, f32)> = None;
    for (index, d) in detections.iter().enumerate() {
        let b = &d.bbox;
        // Also rejects NaN sizes.
        if !(b.width > 0.0 && b.height > 0.0) || !b.area().is_finite() {
            return Err(ExpertError::NonPositiveBox {
                index,
                width: b.width,
                height: b.height,
            });
        }
        if best.map_or(true, |(_, area)| b.area() > area) {
            best = Some((index, b.area()));
        }
    }
    Ok(best.map(|(i, _)| detections[i].embedding.as_slice()))
}

/// Elementwise sum of per-detection class logits. `None` when nothing was
/// detected.
///
/// Each class is summed in `f64` over its values in sorted order, so the
/// result does not depend on the order of the detections.
pub fn sum_object_logits(detections: &[Vec<f32>], num_classes: usize) -> Result<Option<Vec<f32>>, ExpertError> {
    if detections.is_empty() {
        return Ok(None);
    }
    for (index, d) in detections.iter().enumerate() {
        if d.len() != num_classes {
            return Err(ExpertError::LengthMismatch {
                index,
                expected: num_classes,
                got: d.len(),
            });
        }
    }
    let mut column = Vec::with_capacity(detections.len());
    let mut sum = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        column.clear();
        column.extend(detections.iter().map(|d| d[c]));
        column.sort_unstable_by(f32::total_cmp);
        sum.push(column.iter().map(|&v| v as f64).sum::<f64>() as f32);
    }
    if sum.iter().any(|v| !v.is_finite()) {
        return Err(ExpertError::NonFinite);
    }
    Ok(Some(sum))
}

/// Scene logits pass through unchanged and are always present.
pub fn scene_feature(logits: &[f32], version: &str) -> Result<FeatureRecord, ExpertError> {
    if logits.len() != SCENE_CLASSES {
        return Err(ExpertError::SceneLength(logits.len()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(ExpertError::NonFinite);
    }
    Ok(FeatureRecord::present(BranchId::Scene, logits.to_vec(), version))
}

/// Joins OCR words with single spaces and encodes them, or returns `None`
/// below [`OCR_MIN_WORDS`]. Words are passed verbatim, without normalization.
pub fn ocr_gate_and_encode(words: &[String], encoder: &dyn SentenceEncoder) -> Result<Option<Vec<f32>>, ExpertError> {
    if words.len() < OCR_MIN_WORDS {
        return Ok(None);
    }
    let sentence = words.join(" ");
    let v = encoder.encode(&sentence).map_err(ExpertError::Encoder)?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ExpertError::NonFinite);
    }
    Ok(Some(v))
}
