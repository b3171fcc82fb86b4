//! Trainable models: a single-branch linear probe and the multimodal model
//! (branch adapters followed by a fusion head).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::encoders::{BranchId, FeatureBundle, NUM_BRANCHES};
use crate::fusion::{dropout_mask, Checkpoint, FusionInput, Head, HeadSpec};
use crate::tensor::{affine, affine_backward, check_layout, cross_entropy, Init, ParamSlot, Scalar, Tensor};

/// Architecture descriptor stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Adapter of one learnable branch followed by a linear classifier.
    Probe {
        branch: BranchId,
        dim: usize,
        classes: usize,
        dropout: f64,
    },
    /// Adapters on the learnable branches followed by a fusion head.
    Multimodal {
        branch_dims: [usize; NUM_BRANCHES],
        ablation: [bool; NUM_BRANCHES],
        head: HeadSpec,
    },
}

impl ModelSpec {
    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Probe { classes, .. } => *classes,
            ModelSpec::Multimodal { head, .. } => head.classes(),
        }
    }
}

/// The text adapter ends in tanh; the image adapter is linear.
fn adapter_is_tanh(branch: BranchId) -> bool {
    branch.is_textual()
}

fn adapter_layout(branch: BranchId, dim: usize) -> [ParamSlot; 2] {
    [
        ParamSlot::new(format!("adapter.{branch}.weight"), &[dim, dim], Init::FanIn(dim)),
        ParamSlot::new(format!("adapter.{branch}.bias"), &[dim], Init::Zeros),
    ]
}

fn adapter_forward<T: Scalar>(branch: BranchId, w: &Tensor<T>, b: &Tensor<T>, x: &[T]) -> Vec<T> {
    let mut y = affine(&w.data, &b.data, x);
    if adapter_is_tanh(branch) {
        y.iter_mut().for_each(|v| *v = v.tanh());
    }
    y
}

/// Accumulates adapter parameter gradients for output gradient `dy`.
fn adapter_backward<T: Scalar>(
    branch: BranchId,
    w: &Tensor<T>,
    x: &[T],
    y: &[T],
    dy: &[T],
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
) {
    let dz: Vec<T> = if adapter_is_tanh(branch) {
        dy.iter().zip(y).map(|(&g, &v)| g * (T::one() - v * v)).collect()
    } else {
        dy.to_vec()
    };
    affine_backward(&w.data, x, &dz, &mut dw.data, &mut db.data);
}

fn features<T: Scalar>(bundle: &FeatureBundle, branch: BranchId) -> Vec<T> {
    bundle.record(branch).vector.iter().map(|&v| T::of_f32(v)).collect()
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    /// Probe: adapter then classifier. Multimodal: adapters only.
    own: Vec<Tensor<T>>,
    head: Option<Head<T>>,
}

/// Loss and parameter gradients of one example.
pub struct ModelGradients<T> {
    pub loss: T,
    pub logits: Vec<T>,
    pub params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model; initialization is a pure function of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Self::own_layout(&spec)?;
        let own = layout.iter().map(|s| s.build(&mut rng)).collect();
        let head = match &spec {
            ModelSpec::Probe { .. } => None,
            ModelSpec::Multimodal { head, .. } => Some(Head::new(head, &mut rng)?),
        };
        Ok(Self { spec, own, head })
    }

    fn own_layout(spec: &ModelSpec) -> Result<Vec<ParamSlot>, TrainError> {
        match spec {
            ModelSpec::Probe {
                branch,
                dim,
                classes,
                dropout,
            } => {
                if !branch.is_trainable() {
                    return Err(TrainError::Config(format!("branch `{branch}` has no learnable adapter")));
                }
                if *dim == 0 || *classes < 2 || !(0.0..1.0).contains(dropout) {
                    return Err(TrainError::Config("probe needs dim > 0, two classes and dropout in [0, 1)".into()));
                }
                let mut out = adapter_layout(*branch, *dim).to_vec();
                out.push(ParamSlot::new("probe.weight", &[*classes, *dim], Init::FanIn(*dim)));
                out.push(ParamSlot::new("probe.bias", &[*classes], Init::Zeros));
                Ok(out)
            }
            ModelSpec::Multimodal { branch_dims, head, .. } => {
                if branch_dims.contains(&0) {
                    return Err(TrainError::Config("every branch needs a positive dim".into()));
                }
                if let HeadSpec::Mlp(m) = head {
                    if &m.branch_dims != branch_dims {
                        return Err(TrainError::Config("mlp head dims differ from branch dims".into()));
                    }
                }
                if branch_dims.iter().any(|&d| d > head.input_width()) {
                    return Err(TrainError::Config(format!(
                        "branch dims exceed the head's row width {}",
                        head.input_width()
                    )));
                }
                Ok(BranchId::ALL
                    .iter()
                    .filter(|b| b.is_trainable())
                    .flat_map(|&b| adapter_layout(b, branch_dims[b.index()]))
                    .collect())
            }
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let head = self.head.iter().flat_map(|h| h.params());
        self.own.iter().chain(head).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let head = self.head.iter_mut().flat_map(|h| h.params_mut());
        self.own.iter_mut().chain(head).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Adapter tensors for `branch`, if this model has them.
    fn adapter(&self, branch: BranchId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        let prefix = format!("adapter.{branch}.");
        let i = self.own.iter().position(|t| t.name.starts_with(&prefix))?;
        Some((&self.own[i], &self.own[i + 1]))
    }

    fn multimodal_input(&self, bundle: &FeatureBundle) -> Result<(FusionInput<T>, Vec<Vec<T>>), TrainError> {
        let ModelSpec::Multimodal {
            branch_dims,
            ablation,
            head,
        } = &self.spec
        else {
            unreachable!("multimodal input of a probe");
        };
        if bundle.dims() != *branch_dims {
            return Err(TrainError::Data(format!(
                "sample `{}` has branch dims {:?}, model expects {:?}",
                bundle.sample_id,
                bundle.dims(),
                branch_dims
            )));
        }
        let presence = bundle.presence();
        let mut raw = Vec::with_capacity(NUM_BRANCHES);
        let mut rows = Vec::with_capacity(NUM_BRANCHES);
        for b in BranchId::ALL {
            let x = features::<T>(bundle, b);
            let active = presence[b.index()] && ablation[b.index()];
            let row = match self.adapter(b) {
                Some((w, bias)) if active => adapter_forward(b, w, bias, &x),
                _ => x.clone(),
            };
            raw.push(x);
            rows.push(row);
        }
        let input = FusionInput::from_rows(rows, presence, *ablation, head.input_width())?;
        Ok((input, raw))
    }

    pub fn forward(&self, bundle: &FeatureBundle, dropout: Option<&mut dyn RngCore>) -> Result<Vec<T>, TrainError> {
        match (&self.spec, &self.head) {
            (ModelSpec::Probe { branch, dropout: rate, .. }, _) => {
                let x = features::<T>(bundle, *branch);
                Ok(self.probe_forward(*branch, *rate, &x, dropout)?.2)
            }
            (ModelSpec::Multimodal { .. }, Some(head)) => {
                let (input, _) = self.multimodal_input(bundle)?;
                Ok(head.forward(&input, dropout)?)
            }
            _ => unreachable!("multimodal model without head"),
        }
    }

    fn probe_forward(
        &self,
        branch: BranchId,
        rate: f64,
        x: &[T],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(Vec<T>, Option<Vec<T>>, Vec<T>), TrainError> {
        if x.len() != self.own[0].shape[1] {
            return Err(TrainError::Data(format!(
                "branch `{branch}` has dim {}, probe expects {}",
                x.len(),
                self.own[0].shape[1]
            )));
        }
        let y = adapter_forward(branch, &self.own[0], &self.own[1], x);
        let mask = dropout_mask::<T, _>(y.len(), rate, dropout);
        let dropped: Vec<T> = match &mask {
            Some(m) => y.iter().zip(m).map(|(&a, &b)| a * b).collect(),
            None => y.clone(),
        };
        let logits = affine(&self.own[2].data, &self.own[3].data, &dropped);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite("logits".into()));
        }
        Ok((y, mask, logits))
    }

    pub fn backward(
        &self,
        bundle: &FeatureBundle,
        label: usize,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<ModelGradients<T>, TrainError> {
        let mut grads: Vec<Tensor<T>> = self.params().into_iter().map(Tensor::zeros_like).collect();
        let (loss, logits) = self.accumulate_backward(bundle, label, dropout, &mut grads)?;
        if let Some(t) = grads.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::NonFinite(format!("gradient of `{}`", t.name)));
        }
        Ok(ModelGradients {
            loss,
            logits,
            params: grads,
        })
    }

    /// Adds the gradients of one example into `grads`, ordered as
    /// [`Model::params`]. Returns loss and logits; the gradients are not
    /// checked for finiteness.
    pub fn accumulate_backward(
        &self,
        bundle: &FeatureBundle,
        label: usize,
        dropout: Option<&mut dyn RngCore>,
        grads: &mut [Tensor<T>],
    ) -> Result<(T, Vec<T>), TrainError> {
        if label >= self.classes() {
            return Err(TrainError::Data(format!("label {label} out of range")));
        }
        if grads.len() != self.own.len() + self.head.as_ref().map_or(0, |h| h.params().len()) {
            return Err(TrainError::Data("gradient buffer does not match parameters".into()));
        }
        let (loss, logits) = match (&self.spec, &self.head) {
            (ModelSpec::Probe { branch, dropout: rate, .. }, _) => {
                let x = features::<T>(bundle, *branch);
                let (y, mask, logits) = self.probe_forward(*branch, *rate, &x, dropout)?;
                let dropped: Vec<T> = match &mask {
                    Some(m) => y.iter().zip(m).map(|(&a, &b)| a * b).collect(),
                    None => y.clone(),
                };
                let (loss, dlogits) = cross_entropy(&logits, label);
                let (g_adapter, g_probe) = grads.split_at_mut(2);
                let (gw, gb) = g_probe.split_at_mut(1);
                let mut dy = affine_backward(&self.own[2].data, &dropped, &dlogits, &mut gw[0].data, &mut gb[0].data);
                if let Some(m) = &mask {
                    dy.iter_mut().zip(m).for_each(|(g, &s)| *g *= s);
                }
                let (gw, gb) = g_adapter.split_at_mut(1);
                adapter_backward(*branch, &self.own[0], &x, &y, &dy, &mut gw[0], &mut gb[0]);
                (loss, logits)
            }
            (ModelSpec::Multimodal { .. }, Some(head)) => {
                let (input, raw) = self.multimodal_input(bundle)?;
                let n_own = self.own.len();
                let g = head.backward_into(&input, label, dropout, &mut grads[n_own..])?;
                for b in BranchId::ALL {
                    if !input.is_active(b.index()) {
                        continue;
                    }
                    let Some(i) = self.own.iter().position(|t| t.name == format!("adapter.{b}.weight")) else {
                        continue;
                    };
                    let d = input.dims[b.index()];
                    let y = &input.rows[b.index()][..d];
                    let dy = &g.rows[b.index()][..d];
                    let (gw, gb) = grads[i..].split_at_mut(1);
                    adapter_backward(b, &self.own[i], &raw[b.index()], y, dy, &mut gw[0], &mut gb[0]);
                }
                (g.loss, g.logits)
            }
            _ => unreachable!("multimodal model without head"),
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFinite("loss".into()));
        }
        Ok((loss, logits))
    }

    /// Parameters rounded to `f32`.
    pub fn to_checkpoint(&self, seed: u64, manifest: Option<String>) -> Checkpoint {
        Checkpoint {
            architecture: serde_json::to_value(&self.spec).expect("spec serializes"),
            seed,
            manifest,
            tensors: self.params().into_iter().map(|t| t.cast()).collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let spec: ModelSpec = serde_json::from_value(ckpt.architecture.clone())
            .map_err(|e| TrainError::Incompatible(format!("architecture descriptor: {e}")))?;
        let mut layout = Self::own_layout(&spec)?;
        if let ModelSpec::Multimodal { head, .. } = &spec {
            layout.extend(head.layout()?);
        }
        let tensors: Vec<Tensor<T>> = ckpt.tensors.iter().map(|t| t.cast()).collect();
        check_layout(&layout, &tensors).map_err(TrainError::Incompatible)?;
        let n_own = layout.len() - if let ModelSpec::Multimodal { head, .. } = &spec { head.layout()?.len() } else { 0 };
        let mut own = tensors;
        let rest = own.split_off(n_own);
        let head = match &spec {
            ModelSpec::Probe { .. } => None,
            ModelSpec::Multimodal { head, .. } => Some(Head::from_params(head, rest)?),
        };
        Ok(Self { spec, own, head })
    }

    pub fn set_params(&mut self, values: &[Tensor<T>]) {
        for (dst, src) in self.params_mut().into_iter().zip(values) {
            dst.data.copy_from_slice(&src.data);
        }
    }

    pub fn snapshot(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().cloned().collect()
    }
}

/// Copies learnable-branch adapters from single-modal checkpoints into a
/// multimodal model. A missing checkpoint leaves that branch at its fresh
/// initialization and logs a warning. Returns the names of copied tensors.
pub fn init_from_pretrained<T: Scalar>(
    model: &mut Model<T>,
    checkpoints: &[(BranchId, Option<&Checkpoint>)],
) -> Result<Vec<String>, TrainError> {
    if !matches!(model.spec, ModelSpec::Multimodal { .. }) {
        return Err(TrainError::Config("only multimodal models take pretrained branches".into()));
    }
    let mut copied = Vec::new();
    for &(branch, ckpt) in checkpoints {
        let Some(ckpt) = ckpt else {
            log::warn!("no single-modal checkpoint for `{branch}`; keeping fresh initialization");
            continue;
        };
        let source: ModelSpec = serde_json::from_value(ckpt.architecture.clone())
            .map_err(|e| TrainError::Incompatible(format!("architecture descriptor: {e}")))?;
        match source {
            ModelSpec::Probe { branch: b, .. } if b == branch => {}
            other => {
                return Err(TrainError::Incompatible(format!(
                    "checkpoint for `{branch}` describes {other:?}"
                )))
            }
        }
        let prefix = format!("adapter.{branch}.");
        let mut found = 0;
        for src in ckpt.tensors.iter().filter(|t| t.name.starts_with(&prefix)) {
            let dst = model
                .own
                .iter_mut()
                .find(|t| t.name == src.name)
                .ok_or_else(|| TrainError::Incompatible(format!("model has no tensor `{}`", src.name)))?;
            if dst.shape != src.shape {
                return Err(TrainError::Incompatible(format!(
                    "tensor `{}` has shape {:?} in the checkpoint but {:?} in the model",
                    src.name, src.shape, dst.shape
                )));
            }
            *dst = src.cast();
            copied.push(src.name.clone());
            found += 1;
        }
        if found == 0 {
            return Err(TrainError::Incompatible(format!("checkpoint holds no `{prefix}*` tensors")));
        }
    }
    Ok(copied)
}
