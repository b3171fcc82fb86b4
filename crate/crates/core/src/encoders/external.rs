//! Adapter for real models run out of process.
//!
//! The external tool writes one JSON line per sample (keyed by `id` or by
//! `image`) holding the raw model output for one branch; this backend applies
//! the expert post-processing rules to it. Fields by branch:
//!
//! | branch                            | field        |
//! |-----------------------------------|--------------|
//! | text_main, image_main, clip_*     | `vector`     |
//! | face                              | `faces`      |
//! | object                            | `detections` |
//! | scene                             | `logits`     |
//! | ocr                               | `words`, optional precomputed `vector` |

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::expert::{ocr_gate_and_encode, scene_feature, select_largest_face, sum_object_logits, SCENE_CLASSES};
use super::stub::{SentenceEncoder, StubSentenceEncoder};
use super::{Backend, BackendDescriptor, BranchId, EncodeError, FaceDetection, FeatureRecord};
use crate::dataset::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarEntry {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub vector: Option<Vec<f32>>,
    #[serde(default)]
    pub faces: Option<Vec<FaceDetection>>,
    #[serde(default)]
    pub detections: Option<Vec<Vec<f32>>>,
    #[serde(default)]
    pub logits: Option<Vec<f32>>,
    #[serde(default)]
    pub words: Option<Vec<String>>,
}

pub fn parse_sidecar(input: &str) -> Result<Vec<SidecarEntry>, EncodeError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let entry: SidecarEntry = serde_json::from_str(line)
            .map_err(|e| EncodeError::InvalidRecord(format!("sidecar line {}: {e}", i + 1)))?;
        if entry.id.is_some() == entry.image.is_some() {
            return Err(EncodeError::InvalidRecord(format!(
                "sidecar line {}: exactly one of `id` or `image` is required",
                i + 1
            )));
        }
        out.push(entry);
    }
    Ok(out)
}

/// Precomputed vector standing in for the sentence encoder when the sidecar
/// already carries one.
struct Precomputed<'a>(&'a [f32]);

impl SentenceEncoder for Precomputed<'_> {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn encode(&self, _: &str) -> Result<Vec<f32>, String> {
        Ok(self.0.to_vec())
    }
}

pub struct SidecarBackend {
    descriptor: BackendDescriptor,
    by_id: HashMap<String, SidecarEntry>,
    by_image: HashMap<String, SidecarEntry>,
    sentence_encoder: StubSentenceEncoder,
}

impl SidecarBackend {
    pub fn open(descriptor: BackendDescriptor, path: &Path) -> Result<Self, EncodeError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_entries(descriptor, parse_sidecar(&text)?)
    }

    pub fn from_entries(descriptor: BackendDescriptor, entries: Vec<SidecarEntry>) -> Result<Self, EncodeError> {
        if descriptor.branch == BranchId::Scene && descriptor.output_dim != SCENE_CLASSES {
            return Err(EncodeError::Config {
                branch: "scene".into(),
                message: format!("external scene features have {SCENE_CLASSES} logits"),
            });
        }
        let mut by_id = HashMap::new();
        let mut by_image = HashMap::new();
        for e in entries {
            let (map, key) = match (&e.id, &e.image) {
                (Some(id), _) => (&mut by_id, id.clone()),
                (_, Some(img)) => (&mut by_image, img.clone()),
                _ => unreachable!("parse_sidecar enforces a key"),
            };
            if map.insert(key.clone(), e).is_some() {
                return Err(EncodeError::InvalidRecord(format!("duplicate sidecar key `{key}`")));
            }
        }
        let sentence_encoder = StubSentenceEncoder::new(descriptor.output_dim, descriptor.version.clone());
        Ok(Self {
            descriptor,
            by_id,
            by_image,
            sentence_encoder,
        })
    }

    fn lookup(&self, sample: &Sample) -> Option<&SidecarEntry> {
        self.by_id.get(&sample.id).or_else(|| self.by_image.get(&sample.image_ref))
    }
}

impl Backend for SidecarBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode(&self, sample: &Sample) -> Result<FeatureRecord, EncodeError> {
        let d = &self.descriptor;
        let fail = |m: String| EncodeError::backend(sample, d.branch, m);
        let entry = self.lookup(sample).ok_or_else(|| fail("no sidecar entry".into()))?;
        let need = |field: &str| fail(format!("sidecar entry lacks `{field}`"));
        let check_dim = |v: &[f32]| {
            if v.len() == d.output_dim {
                Ok(())
            } else {
                Err(fail(format!("vector has length {}, expected {}", v.len(), d.output_dim)))
            }
        };
        let vector = match d.branch {
            BranchId::TextMain | BranchId::ImageMain | BranchId::ClipText | BranchId::ClipImage => {
                Some(entry.vector.clone().ok_or_else(|| need("vector"))?)
            }
            BranchId::Face => {
                let faces = entry.faces.as_ref().ok_or_else(|| need("faces"))?;
                select_largest_face(faces).map_err(|e| fail(e.to_string()))?.map(<[f32]>::to_vec)
            }
            BranchId::Object => {
                let dets = entry.detections.as_ref().ok_or_else(|| need("detections"))?;
                sum_object_logits(dets, d.output_dim).map_err(|e| fail(e.to_string()))?
            }
            BranchId::Scene => {
                let logits = entry.logits.as_ref().ok_or_else(|| need("logits"))?;
                let record = scene_feature(logits, &d.version).map_err(|e| fail(e.to_string()))?;
                Some(record.vector)
            }
            BranchId::Ocr => {
                let words = entry.words.as_ref().ok_or_else(|| need("words"))?;
                let result = match &entry.vector {
                    Some(v) => ocr_gate_and_encode(words, &Precomputed(v)),
                    None => ocr_gate_and_encode(words, &self.sentence_encoder),
                };
                result.map_err(|e| fail(e.to_string()))?
            }
        };
        match vector {
            Some(v) => {
                check_dim(&v)?;
                Ok(FeatureRecord::present(d.branch, v, &d.version))
            }
            None => Ok(FeatureRecord::absent(d.branch, d.output_dim, &d.version)),
        }
    }
}
