//! Feature branches and the backend contract every encoder implements.
//!
//! Eight branches feed the fusion heads in a fixed order. The face, object and
//! ocr experts may report a feature as absent; absent records are kept as zero
//! vectors so every bundle has the same arity.

mod expert;
mod external;
mod stub;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expert::{
    ocr_gate_and_encode, scene_feature, select_largest_face, sum_object_logits, BoundingBox, ExpertError,
    FaceDetection, OCR_MIN_WORDS, SCENE_CLASSES,
};
pub use external::{parse_sidecar, SidecarBackend, SidecarEntry};
pub use stub::{stable_hash, PresenceRule, SentenceEncoder, StubBackend, StubSentenceEncoder};

use crate::dataset::Sample;

/// Width every branch feature is zero-padded to for the sequence head.
pub const PAD_WIDTH: usize = 1024;
pub const NUM_BRANCHES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchId {
    TextMain,
    ImageMain,
    ClipText,
    ClipImage,
    Face,
    Object,
    Scene,
    Ocr,
}

impl BranchId {
    /// Canonical fusion order.
    pub const ALL: [BranchId; NUM_BRANCHES] = [
        BranchId::TextMain,
        BranchId::ImageMain,
        BranchId::ClipText,
        BranchId::ClipImage,
        BranchId::Face,
        BranchId::Object,
        BranchId::Scene,
        BranchId::Ocr,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchId::TextMain => "text_main",
            BranchId::ImageMain => "image_main",
            BranchId::ClipText => "clip_text",
            BranchId::ClipImage => "clip_image",
            BranchId::Face => "face",
            BranchId::Object => "object",
            BranchId::Scene => "scene",
            BranchId::Ocr => "ocr",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    /// Fixed pre-trained visual experts.
    pub fn is_expert(self) -> bool {
        matches!(self, BranchId::Face | BranchId::Object | BranchId::Scene | BranchId::Ocr)
    }

    /// Branches with a presence rule: no face, no detected object, or too
    /// few OCR words. Scene logits always exist.
    pub fn can_be_absent(self) -> bool {
        matches!(self, BranchId::Face | BranchId::Object | BranchId::Ocr)
    }

    /// The learnable visual-textual branches.
    pub fn is_trainable(self) -> bool {
        matches!(self, BranchId::TextMain | BranchId::ImageMain)
    }

    /// Branches that read the sample's text rather than its image.
    pub fn is_textual(self) -> bool {
        matches!(self, BranchId::TextMain | BranchId::ClipText)
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("sample `{sample_id}`, branch `{branch}`: {message}")]
    Backend {
        sample_id: String,
        branch: BranchId,
        message: String,
    },
    #[error("no backend registered for branch `{0}`")]
    MissingBranch(BranchId),
    #[error("invalid feature record: {0}")]
    InvalidRecord(String),
    #[error("backend configuration for `{branch}`: {message}")]
    Config { branch: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EncodeError {
    pub fn backend(sample: &Sample, branch: BranchId, message: impl fmt::Display) -> Self {
        EncodeError::Backend {
            sample_id: sample.id.clone(),
            branch,
            message: message.to_string(),
        }
    }
}

/// One branch's feature for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub branch: BranchId,
    pub vector: Vec<f32>,
    pub present: bool,
    pub backend_version: String,
}

impl FeatureRecord {
    pub fn present(branch: BranchId, vector: Vec<f32>, version: &str) -> Self {
        Self {
            branch,
            vector,
            present: true,
            backend_version: version.to_string(),
        }
    }

    pub fn absent(branch: BranchId, dim: usize, version: &str) -> Self {
        Self {
            branch,
            vector: vec![0.0; dim],
            present: false,
            backend_version: version.to_string(),
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        let fail = |m: String| Err(EncodeError::InvalidRecord(format!("{}: {m}", self.branch)));
        if self.vector.is_empty() {
            return fail("zero-length vector".into());
        }
        if self.vector.len() > PAD_WIDTH {
            return fail(format!("dim {} exceeds pad width {PAD_WIDTH}", self.vector.len()));
        }
        if let Some(i) = self.vector.iter().position(|v| !v.is_finite()) {
            return fail(format!("non-finite entry at {i}"));
        }
        if !self.present && self.vector.iter().any(|v| v.to_bits() != 0) {
            return fail("absent record with a nonzero vector".into());
        }
        if !self.present && !self.branch.can_be_absent() {
            return fail("branch has no absence rule".into());
        }
        if self.backend_version.is_empty() {
            return fail("empty backend version".into());
        }
        Ok(())
    }
}

/// All eight branch records of one sample, in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub sample_id: String,
    records: Vec<FeatureRecord>,
}

impl FeatureBundle {
    pub fn new(sample_id: impl Into<String>, records: Vec<FeatureRecord>) -> Result<Self, EncodeError> {
        if records.len() != NUM_BRANCHES {
            return Err(EncodeError::InvalidRecord(format!(
                "bundle needs {NUM_BRANCHES} records, got {}",
                records.len()
            )));
        }
        for (r, expected) in records.iter().zip(BranchId::ALL) {
            if r.branch != expected {
                return Err(EncodeError::InvalidRecord(format!(
                    "bundle slot `{expected}` holds `{}`",
                    r.branch
                )));
            }
            r.validate()?;
        }
        Ok(Self {
            sample_id: sample_id.into(),
            records,
        })
    }

    pub fn record(&self, branch: BranchId) -> &FeatureRecord {
        &self.records[branch.index()]
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    /// Replaces one branch's record, keeping bundle invariants.
    pub fn with_record(mut self, record: FeatureRecord) -> Result<Self, EncodeError> {
        record.validate()?;
        let idx = record.branch.index();
        self.records[idx] = record;
        Ok(self)
    }

    pub fn presence(&self) -> [bool; NUM_BRANCHES] {
        std::array::from_fn(|i| self.records[i].present)
    }

    pub fn dims(&self) -> [usize; NUM_BRANCHES] {
        std::array::from_fn(|i| self.records[i].dim())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub branch: BranchId,
    pub output_dim: usize,
    pub trainable: bool,
    pub version: String,
}

impl BackendDescriptor {
    pub fn new(branch: BranchId, output_dim: usize, version: impl Into<String>) -> Result<Self, EncodeError> {
        let version = version.into();
        let cfg_err = |message: String| EncodeError::Config {
            branch: branch.name().into(),
            message,
        };
        if output_dim == 0 || output_dim > PAD_WIDTH {
            return Err(cfg_err(format!("output_dim must be in 1..={PAD_WIDTH}, got {output_dim}")));
        }
        if version.is_empty() {
            return Err(cfg_err("empty version string".into()));
        }
        Ok(Self {
            branch,
            output_dim,
            trainable: branch.is_trainable(),
            version,
        })
    }
}

/// The encoder contract. Implementations are read-only after construction.
pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn encode(&self, sample: &Sample) -> Result<FeatureRecord, EncodeError>;

    /// Backends that cannot serve concurrent calls return false; the
    /// pipeline then encodes their branch sequentially.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Calls `backend.encode` and checks the returned record against the
/// descriptor and record invariants.
pub fn encode_checked(backend: &dyn Backend, sample: &Sample) -> Result<FeatureRecord, EncodeError> {
    let d = backend.descriptor();
    let record = backend.encode(sample)?;
    if record.branch != d.branch || record.dim() != d.output_dim || record.backend_version != d.version {
        return Err(EncodeError::backend(
            sample,
            d.branch,
            format!(
                "record ({}, dim {}, version {}) does not match descriptor ({}, dim {}, version {})",
                record.branch,
                record.dim(),
                record.backend_version,
                d.branch,
                d.output_dim,
                d.version
            ),
        ));
    }
    record.validate().map_err(|e| EncodeError::backend(sample, d.branch, e))?;
    Ok(record)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Stub,
    External,
}

/// Per-branch backend declaration from the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    pub version: String,
    pub output_dim: usize,
    /// Stub only.
    #[serde(default)]
    pub presence: Option<PresenceRule>,
    /// Stub only: adds this amplitude at coordinate `label % dim`.
    #[serde(default)]
    pub planted_amplitude: Option<f32>,
    /// Stub only.
    #[serde(default)]
    pub noise_scale: Option<f32>,
    /// External only: JSONL of precomputed model outputs.
    #[serde(default)]
    pub sidecar: Option<PathBuf>,
}

/// One backend per branch.
#[derive(Default)]
pub struct Registry {
    backends: BTreeMap<BranchId, Box<dyn Backend>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.backends.values().map(|b| b.descriptor())).finish()
    }
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, backend: Box<dyn Backend>) {
        self.backends.insert(backend.descriptor().branch, backend);
    }

    pub fn get(&self, branch: BranchId) -> Option<&dyn Backend> {
        self.backends.get(&branch).map(|b| b.as_ref())
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &BackendDescriptor> {
        self.backends.values().map(|b| b.descriptor())
    }

    pub fn check_complete(&self) -> Result<(), EncodeError> {
        match BranchId::ALL.into_iter().find(|b| !self.backends.contains_key(b)) {
            Some(missing) => Err(EncodeError::MissingBranch(missing)),
            None => Ok(()),
        }
    }

    /// Builds a registry from configuration; relative sidecar paths resolve
    /// against `base_dir`.
    pub fn from_specs(specs: &BTreeMap<String, BackendSpec>, base_dir: &Path) -> Result<Self, EncodeError> {
        let mut registry = Self::new();
        for (name, spec) in specs {
            let branch = BranchId::from_name(name).ok_or_else(|| EncodeError::Config {
                branch: name.clone(),
                message: "unknown branch".into(),
            })?;
            let descriptor = BackendDescriptor::new(branch, spec.output_dim, spec.version.clone())?;
            let cfg_err = |message: &str| EncodeError::Config {
                branch: name.clone(),
                message: message.into(),
            };
            let backend: Box<dyn Backend> = match spec.kind {
                BackendKind::Stub => {
                    if spec.sidecar.is_some() {
                        return Err(cfg_err("`sidecar` applies to external backends only"));
                    }
                    let mut stub = StubBackend::new(descriptor, spec.presence.clone().unwrap_or_default())?;
                    if let Some(a) = spec.planted_amplitude {
                        stub = stub.with_planted_signal(a);
                    }
                    if let Some(s) = spec.noise_scale {
                        stub = stub.with_noise_scale(s);
                    }
                    Box::new(stub)
                }
                BackendKind::External => {
                    if spec.presence.is_some() || spec.planted_amplitude.is_some() || spec.noise_scale.is_some() {
                        return Err(cfg_err("stub parameters given for an external backend"));
                    }
                    let path = spec.sidecar.as_ref().ok_or_else(|| cfg_err("external backend needs `sidecar`"))?;
                    let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                    Box::new(SidecarBackend::open(descriptor, &path)?)
                }
            };
            registry.insert(backend);
        }
        Ok(registry)
    }
}

/// Encodes one sample on every branch, in canonical order.
pub fn extract_bundle(sample: &Sample, registry: &Registry) -> Result<FeatureBundle, EncodeError> {
    registry.check_complete()?;
    let records = BranchId::ALL
        .into_iter()
        .map(|b| encode_checked(registry.get(b).expect("registry is complete"), sample))
        .collect::<Result<Vec<_>, _>>()?;
    FeatureBundle::new(sample.id.clone(), records)
}
