//! Deterministic stand-in encoders for desk-scale runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Backend, BackendDescriptor, EncodeError, FeatureRecord};
use crate::dataset::Sample;

/// First eight bytes (little-endian) of SHA-256 over the NUL-joined parts.
pub fn stable_hash(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn gaussian_vector(seed: u64, dim: usize, scale: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect()
}

/// Decides whether a stub expert reports its feature as present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PresenceRule {
    #[default]
    Always,
    Never,
    /// Present iff `stable_hash([sample_id])` is even.
    HashEven,
    /// Present for roughly this fraction of samples, keyed by id and branch.
    Fraction(f64),
}

impl PresenceRule {
    pub fn is_present(&self, sample_id: &str, branch: &str) -> bool {
        match self {
            PresenceRule::Always => true,
            PresenceRule::Never => false,
            PresenceRule::HashEven => stable_hash(&[sample_id]) % 2 == 0,
            PresenceRule::Fraction(p) => {
                let u = stable_hash(&["presence", sample_id, branch]) as f64 / 2f64.powi(64);
                u < *p
            }
        }
    }
}

/// Seeded pseudo-random features keyed by `(sample_id, branch, version)`.
///
/// With a planted signal the vector also carries `amplitude` at coordinate
/// `label % dim`, which makes the label linearly recoverable from this branch.
#[derive(Debug, Clone)]
pub struct StubBackend {
    descriptor: BackendDescriptor,
    presence: PresenceRule,
    planted_amplitude: Option<f32>,
    noise_scale: f32,
}

impl StubBackend {
    pub fn new(descriptor: BackendDescriptor, presence: PresenceRule) -> Result<Self, EncodeError> {
        if presence != PresenceRule::Always && !descriptor.branch.can_be_absent() {
            return Err(EncodeError::Config {
                branch: descriptor.branch.name().into(),
                message: "this branch is always present; presence rule must be `always`".into(),
            });
        }
        if let PresenceRule::Fraction(p) = presence {
            if !(0.0..=1.0).contains(&p) {
                return Err(EncodeError::Config {
                    branch: descriptor.branch.name().into(),
                    message: format!("presence fraction {p} outside [0, 1]"),
                });
            }
        }
        Ok(Self {
            descriptor,
            presence,
            planted_amplitude: None,
            noise_scale: 1.0,
        })
    }

    pub fn with_planted_signal(mut self, amplitude: f32) -> Self {
        self.planted_amplitude = Some(amplitude);
        self
    }

    pub fn with_noise_scale(mut self, scale: f32) -> Self {
        self.noise_scale = scale;
        self
    }
}

impl Backend for StubBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn encode(&self, sample: &Sample) -> Result<FeatureRecord, EncodeError> {
        let d = &self.descriptor;
        let branch = d.branch.name();
        if !self.presence.is_present(&sample.id, branch) {
            return Ok(FeatureRecord::absent(d.branch, d.output_dim, &d.version));
        }
        let seed = stable_hash(&[&sample.id, branch, &d.version]);
        let mut v = gaussian_vector(seed, d.output_dim, self.noise_scale);
        if let Some(a) = self.planted_amplitude {
            v[sample.label % d.output_dim] += a;
        }
        Ok(FeatureRecord::present(d.branch, v, &d.version))
    }
}

/// Text-to-vector encoder used for OCR word sequences.
pub trait SentenceEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, sentence: &str) -> Result<Vec<f32>, String>;
}

/// Hash-seeded sentence vectors; identical sentences map to identical vectors.
#[derive(Debug, Clone)]
pub struct StubSentenceEncoder {
    dim: usize,
    version: String,
}

impl StubSentenceEncoder {
    pub fn new(dim: usize, version: impl Into<String>) -> Self {
        Self {
            dim,
            version: version.into(),
        }
    }
}

impl SentenceEncoder for StubSentenceEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, sentence: &str) -> Result<Vec<f32>, String> {
        Ok(gaussian_vector(stable_hash(&["sentence", &self.version, sentence]), self.dim, 1.0))
    }
}
