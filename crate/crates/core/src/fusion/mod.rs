//! Fusion heads: a concatenation MLP and a masked transformer encoder over
//! the eight zero-padded branch rows.

mod checkpoint;
mod mlp;
mod transformer;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorMeta,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use mlp::{MlpHead, MlpSpec};
pub use transformer::{TransformerHead, TransformerSpec};

use crate::encoders::{BranchId, FeatureBundle, NUM_BRANCHES, PAD_WIDTH};
use crate::tensor::{check_layout, cross_entropy, zeros_like_all, ParamSlot, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("feature of length {len} does not fit pad width {target}")]
    PadOverflow { len: usize, target: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid head spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Zero-extends `vector` to `target` entries. Never truncates.
pub fn pad_feature<T: Scalar>(vector: &[T], target: usize) -> Result<Vec<T>, FusionError> {
    if vector.len() > target {
        return Err(FusionError::PadOverflow {
            len: vector.len(),
            target,
        });
    }
    let mut out = vector.to_vec();
    out.resize(target, T::zero());
    Ok(out)
}

/// Ablation mask with every branch active except `removed`.
pub fn ablation_mask(removed: &[BranchId]) -> [bool; NUM_BRANCHES] {
    let mut mask = [true; NUM_BRANCHES];
    for b in removed {
        mask[b.index()] = false;
    }
    mask
}

/// The eight branch rows of one sample, padded to a common width.
///
/// A row takes part in fusion only when both its presence and ablation flags
/// are set; other rows are stored as zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionInput<T> {
    pub width: usize,
    pub rows: Vec<Vec<T>>,
    /// Unpadded length of each row.
    pub dims: [usize; NUM_BRANCHES],
    pub presence: [bool; NUM_BRANCHES],
    pub ablation: [bool; NUM_BRANCHES],
}

impl<T: Scalar> FusionInput<T> {
    pub fn from_rows(
        rows: Vec<Vec<T>>,
        presence: [bool; NUM_BRANCHES],
        ablation: [bool; NUM_BRANCHES],
        width: usize,
    ) -> Result<Self, FusionError> {
        if rows.len() != NUM_BRANCHES {
            return Err(FusionError::DimensionMismatch(format!(
                "expected {NUM_BRANCHES} rows, got {}",
                rows.len()
            )));
        }
        let mut dims = [0; NUM_BRANCHES];
        let mut padded = Vec::with_capacity(NUM_BRANCHES);
        for (i, row) in rows.iter().enumerate() {
            dims[i] = row.len();
            if presence[i] && ablation[i] {
                padded.push(pad_feature(row, width)?);
            } else {
                if row.len() > width {
                    return Err(FusionError::PadOverflow { len: row.len(), target: width });
                }
                padded.push(vec![T::zero(); width]);
            }
        }
        Ok(Self {
            width,
            rows: padded,
            dims,
            presence,
            ablation,
        })
    }

    pub fn is_active(&self, branch: usize) -> bool {
        self.presence[branch] && self.ablation[branch]
    }

    pub fn active(&self) -> [bool; NUM_BRANCHES] {
        std::array::from_fn(|i| self.is_active(i))
    }

    /// Checks the row layout against the declared width and dims.
    pub fn check(&self) -> Result<(), FusionError> {
        if self.rows.len() != NUM_BRANCHES || self.rows.iter().any(|r| r.len() != self.width) {
            return Err(FusionError::DimensionMismatch(format!(
                "rows must be {NUM_BRANCHES} x {}",
                self.width
            )));
        }
        if self.dims.iter().any(|&d| d > self.width) {
            return Err(FusionError::DimensionMismatch("branch dim exceeds row width".into()));
        }
        Ok(())
    }
}

/// Builds the fusion input of one sample at the standard pad width.
pub fn assemble<T: Scalar>(bundle: &FeatureBundle, ablation: [bool; NUM_BRANCHES]) -> Result<FusionInput<T>, FusionError> {
    assemble_with_width(bundle, ablation, PAD_WIDTH)
}

pub fn assemble_with_width<T: Scalar>(
    bundle: &FeatureBundle,
    ablation: [bool; NUM_BRANCHES],
    width: usize,
) -> Result<FusionInput<T>, FusionError> {
    let rows = bundle
        .records()
        .iter()
        .map(|r| r.vector.iter().map(|&v| T::of_f32(v)).collect())
        .collect();
    FusionInput::from_rows(rows, bundle.presence(), ablation, width)
}

/// Argmax with ties going to the lowest index.
pub fn predict<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Architecture of a fusion head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    Mlp(MlpSpec),
    Transformer(TransformerSpec),
}

impl HeadSpec {
    pub fn classes(&self) -> usize {
        match self {
            HeadSpec::Mlp(s) => s.classes,
            HeadSpec::Transformer(s) => s.classes,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            HeadSpec::Mlp(s) => s.dropout,
            HeadSpec::Transformer(s) => s.dropout,
        }
    }

    /// Row width the head expects in its [`FusionInput`]. The MLP reads
    /// unpadded rows, so any width holding its widest branch will do.
    pub fn input_width(&self) -> usize {
        match self {
            HeadSpec::Mlp(s) => s.branch_dims.iter().copied().max().unwrap_or(0),
            HeadSpec::Transformer(s) => s.width,
        }
    }

    pub fn validate(&self) -> Result<(), FusionError> {
        match self {
            HeadSpec::Mlp(s) => s.validate(),
            HeadSpec::Transformer(s) => s.validate(),
        }
    }

    /// Parameter names, shapes and initializers in declaration order.
    pub fn layout(&self) -> Result<Vec<ParamSlot>, FusionError> {
        self.validate()?;
        Ok(match self {
            HeadSpec::Mlp(s) => s.layout(),
            HeadSpec::Transformer(s) => s.layout(),
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            HeadSpec::Mlp(_) => "mlp",
            HeadSpec::Transformer(_) => "transformer",
        }
    }
}

/// Loss, logits and gradients of one sample.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: T,
    pub logits: Vec<T>,
    /// One tensor per parameter, in declaration order.
    pub params: Vec<Tensor<T>>,
    /// Gradient with respect to each padded input row; zero for inactive rows.
    pub rows: Vec<Vec<T>>,
}

/// Loss, logits and input-row gradients of one sample whose parameter
/// gradients were added to a caller-owned buffer.
#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub loss: T,
    pub logits: Vec<T>,
    pub rows: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub enum Head<T> {
    Mlp(MlpHead<T>),
    Transformer(TransformerHead<T>),
}

impl<T: Scalar> Head<T> {
    pub fn new<R: Rng>(spec: &HeadSpec, rng: &mut R) -> Result<Self, FusionError> {
        let layout = spec.layout()?;
        let params = layout.iter().map(|slot| slot.build(rng)).collect();
        Self::from_params(spec, params)
    }

    /// Rebuilds a head from stored tensors; names and shapes must match.
    pub fn from_params(spec: &HeadSpec, params: Vec<Tensor<T>>) -> Result<Self, FusionError> {
        check_layout(&spec.layout()?, &params).map_err(FusionError::Checkpoint)?;
        Ok(match spec {
            HeadSpec::Mlp(s) => Head::Mlp(MlpHead::from_parts(s.clone(), params)),
            HeadSpec::Transformer(s) => Head::Transformer(TransformerHead::from_parts(s.clone(), params)),
        })
    }

    pub fn spec(&self) -> HeadSpec {
        match self {
            Head::Mlp(h) => HeadSpec::Mlp(h.spec().clone()),
            Head::Transformer(h) => HeadSpec::Transformer(h.spec().clone()),
        }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        match self {
            Head::Mlp(h) => h.params(),
            Head::Transformer(h) => h.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        match self {
            Head::Mlp(h) => h.params_mut(),
            Head::Transformer(h) => h.params_mut(),
        }
    }

    /// Logits for one sample. Dropout is applied only when `dropout_rng` is
    /// given (training mode).
    pub fn forward(&self, input: &FusionInput<T>, dropout_rng: Option<&mut dyn RngCore>) -> Result<Vec<T>, FusionError> {
        let logits = match self {
            Head::Mlp(h) => h.forward(input, dropout_rng)?,
            Head::Transformer(h) => h.forward(input, dropout_rng)?,
        };
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite("logits".into()));
        }
        Ok(logits)
    }

    /// Cross-entropy loss of one sample and its gradients.
    pub fn backward(
        &self,
        input: &FusionInput<T>,
        label: usize,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Gradients<T>, FusionError> {
        let mut params = zeros_like_all(self.params());
        let b = self.backward_into(input, label, dropout_rng, &mut params)?;
        for t in &params {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(FusionError::NonFinite(format!("gradient of `{}`", t.name)));
            }
        }
        if b.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite("input gradient".into()));
        }
        Ok(Gradients {
            loss: b.loss,
            logits: b.logits,
            params,
            rows: b.rows,
        })
    }

    /// Like [`Head::backward`] but adds parameter gradients into `grads`
    /// (one tensor per parameter) instead of allocating them. Only the loss
    /// and logits are checked for finiteness.
    pub fn backward_into(
        &self,
        input: &FusionInput<T>,
        label: usize,
        dropout_rng: Option<&mut dyn RngCore>,
        grads: &mut [Tensor<T>],
    ) -> Result<Backward<T>, FusionError> {
        let classes = self.spec().classes();
        if label >= classes {
            return Err(FusionError::InvalidLabel { label, classes });
        }
        if grads.len() != self.params().len() {
            return Err(FusionError::DimensionMismatch("gradient buffer does not match parameters".into()));
        }
        let b = match self {
            Head::Mlp(h) => h.backward_into(input, label, dropout_rng, grads)?,
            Head::Transformer(h) => h.backward_into(input, label, dropout_rng, grads)?,
        };
        if !b.loss.is_finite() || b.logits.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite("loss".into()));
        }
        Ok(b)
    }
}

/// Per-unit inverted-dropout scale factors (`0` or `1/(1-rate)`), or `None`
/// in eval mode.
pub(crate) fn dropout_mask<T: Scalar, R: RngCore + ?Sized>(n: usize, rate: f64, rng: Option<&mut R>) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::of(1.0 / (1.0 - rate));
    Some(
        (0..n)
            .map(|_| if rng.gen::<f64>() >= rate { keep } else { T::zero() })
            .collect(),
    )
}

fn apply_mask<T: Scalar>(v: &mut [T], mask: Option<&[T]>) {
    if let Some(m) = mask {
        for (x, s) in v.iter_mut().zip(m) {
            *x *= *s;
        }
    }
}

fn loss_grad<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    cross_entropy(logits, label)
}

fn validate_dropout(rate: f64) -> Result<(), FusionError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(FusionError::InvalidSpec(format!("dropout {rate} outside [0, 1)")));
    }
    Ok(())
}
