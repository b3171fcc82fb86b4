//! The TOML run configuration. One file describes a whole experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sentifuse::dataset::Corpus;
use sentifuse::encoders::{BackendSpec, BranchId, NUM_BRANCHES, PAD_WIDTH};
use sentifuse::evaluation::F1Average;
use sentifuse::fusion::{ablation_mask, HeadSpec, MlpSpec, TransformerSpec};
use sentifuse::textnorm::NormPolicy;
use sentifuse::training::{default_config, Stage, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    #[serde(default)]
    pub normalization: NormPolicy,
    /// Keyed by branch name.
    pub backends: BTreeMap<String, BackendSpec>,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub manifest: PathBuf,
    /// Must agree with the manifest's declaration when given.
    #[serde(default)]
    pub corpus: Option<Corpus>,
    /// Feature cache root. `SENTIFUSE_CACHE` takes precedence.
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// `extract` records failing samples and continues instead of aborting.
    #[serde(default)]
    pub keep_going: bool,
}

fn default_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Mlp,
    Transformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub head: HeadKind,
    pub mlp_hidden: [usize; 2],
    pub width: usize,
    pub heads: usize,
    /// Defaults to four times `width`.
    pub ffn: Option<usize>,
    pub layers: usize,
    pub ln_eps: f64,
    /// Branches removed from training and inference.
    pub ablation: Vec<String>,
}

impl Default for FusionSection {
    fn default() -> Self {
        let t = TransformerSpec::new(2);
        Self {
            head: HeadKind::Mlp,
            mlp_hidden: [1024, 256],
            width: t.width,
            heads: t.heads,
            ffn: None,
            layers: t.layers,
            ln_eps: t.ln_eps,
            ablation: Vec::new(),
        }
    }
}

/// Unset hyperparameters fall back to the published values for the stage
/// and corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub stage: Stage,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub dropout: Option<f64>,
    pub seed: Option<u64>,
    pub weight_decay: Option<f64>,
    pub loss_tolerance: Option<f64>,
    pub f1_average: Option<F1Average>,
    /// Single-modal checkpoints keyed by branch, used to initialize the
    /// multimodal stage.
    pub pretrained: BTreeMap<String, PathBuf>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            stage: Stage::Multimodal,
            learning_rate: None,
            batch_size: None,
            max_epochs: None,
            patience: None,
            dropout: None,
            seed: None,
            weight_decay: None,
            loss_tolerance: None,
            f1_average: None,
            pretrained: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalPart {
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// One run on the fixed split.
    #[default]
    Split,
    /// Mean over k-fold cross-validation.
    Folds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// Checkpoint for `eval`; defaults to the one `train` writes under the
    /// output root.
    pub checkpoint: Option<PathBuf>,
    pub on: EvalPart,
    pub protocol: ProtocolKind,
    pub folds: usize,
    pub fold_seed: u64,
    /// Share of each cross-validation remainder used for validation.
    pub cv_val_fraction: f64,
    /// Branches removed one at a time by `ablate`; all eight when unset.
    pub ablate: Option<Vec<String>>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            on: EvalPart::Test,
            protocol: ProtocolKind::Split,
            folds: 10,
            fold_seed: 0,
            cv_val_fraction: 0.1,
            ablate: None,
        }
    }
}

/// Parses a configuration document. Errors name the offending key.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.message().to_string();
        let key = match unknown_field(&message) {
            Some(field) if path == "." => field.to_string(),
            _ => path,
        };
        CliError::config(key, message)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn unknown_field(message: &str) -> Option<&str> {
    let rest = message.strip_prefix("unknown field `")?;
    rest.split('`').next()
}

fn branch(key: &str, name: &str) -> Result<BranchId, CliError> {
    BranchId::from_name(name).ok_or_else(|| CliError::config(key, format!("unknown branch `{name}`")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        for (key, v) in [("dataset.val_fraction", d.val_fraction), ("dataset.test_fraction", d.test_fraction)] {
            if !(0.0..1.0).contains(&v) {
                return Err(CliError::config(key, "must be in [0, 1)"));
            }
        }
        if d.val_fraction + d.test_fraction >= 1.0 {
            return Err(CliError::config("dataset.test_fraction", "validation and test leave no training data"));
        }
        self.normalization
            .validate()
            .map_err(|e| CliError::config("normalization", e))?;
        for name in self.backends.keys() {
            branch(&format!("backends.{name}"), name)?;
        }
        if let Some(b) = BranchId::ALL.into_iter().find(|b| !self.backends.contains_key(b.name())) {
            return Err(CliError::config(format!("backends.{b}"), "no backend declared for this branch"));
        }
        for name in &self.fusion.ablation {
            branch("fusion.ablation", name)?;
        }
        for name in self.training.pretrained.keys() {
            let b = branch(&format!("training.pretrained.{name}"), name)?;
            if !b.is_trainable() {
                return Err(CliError::config(
                    format!("training.pretrained.{name}"),
                    "only learnable branches take pretrained weights",
                ));
            }
        }
        let e = &self.evaluation;
        if e.folds < 2 {
            return Err(CliError::config("evaluation.folds", "need at least two folds"));
        }
        if !(e.cv_val_fraction > 0.0 && e.cv_val_fraction < 1.0) {
            return Err(CliError::config("evaluation.cv_val_fraction", "must be in (0, 1)"));
        }
        for name in e.ablate.iter().flatten() {
            branch("evaluation.ablate", name)?;
        }
        Ok(())
    }

    /// Resolved training hyperparameters for `corpus`.
    pub fn train_config(&self, corpus: Corpus) -> Result<TrainConfig, CliError> {
        let t = &self.training;
        let mut c = default_config(t.stage, corpus.name()).map_err(|e| CliError::config("dataset.corpus", e))?;
        c.learning_rate = t.learning_rate.unwrap_or(c.learning_rate);
        c.batch_size = t.batch_size.unwrap_or(c.batch_size);
        c.max_epochs = t.max_epochs.unwrap_or(c.max_epochs);
        c.patience = t.patience.unwrap_or(c.patience);
        c.dropout = t.dropout.unwrap_or(c.dropout);
        c.seed = t.seed.unwrap_or(c.seed);
        c.weight_decay = t.weight_decay.unwrap_or(c.weight_decay);
        c.loss_tolerance = t.loss_tolerance.unwrap_or(c.loss_tolerance);
        c.f1_average = t.f1_average.unwrap_or(c.f1_average);
        c.validate().map_err(|e| CliError::config("training", e))?;
        Ok(c)
    }

    /// Output dimension of every branch, in canonical order.
    pub fn branch_dims(&self) -> [usize; NUM_BRANCHES] {
        BranchId::ALL.map(|b| self.backends[b.name()].output_dim)
    }

    pub fn head_spec(&self, classes: usize, dropout: f64) -> Result<HeadSpec, CliError> {
        let f = &self.fusion;
        let spec = match f.head {
            HeadKind::Mlp => HeadSpec::Mlp(MlpSpec {
                branch_dims: self.branch_dims(),
                hidden: f.mlp_hidden,
                classes,
                dropout,
            }),
            HeadKind::Transformer => {
                if f.width > PAD_WIDTH || self.branch_dims().iter().any(|&d| d > f.width) {
                    return Err(CliError::config(
                        "fusion.width",
                        format!("must cover every branch dim and not exceed {PAD_WIDTH}"),
                    ));
                }
                HeadSpec::Transformer(TransformerSpec {
                    width: f.width,
                    heads: f.heads,
                    ffn: f.ffn.unwrap_or(4 * f.width),
                    layers: f.layers,
                    classes,
                    dropout,
                    ln_eps: f.ln_eps,
                })
            }
        };
        spec.validate().map_err(|e| CliError::config("fusion", e))?;
        Ok(spec)
    }

    pub fn ablation(&self) -> [bool; NUM_BRANCHES] {
        let removed: Vec<BranchId> = self.fusion.ablation.iter().filter_map(|n| BranchId::from_name(n)).collect();
        ablation_mask(&removed)
    }

    /// Branches `ablate` removes one at a time.
    pub fn ablate_list(&self) -> Vec<String> {
        match &self.evaluation.ablate {
            Some(list) => list.clone(),
            None => BranchId::ALL.iter().map(|b| b.name().to_string()).collect(),
        }
    }

    pub fn backend_versions(&self) -> BTreeMap<String, String> {
        self.backends.iter().map(|(k, v)| (k.clone(), v.version.clone())).collect()
    }
}

/// Resolves `path` against the directory holding the configuration file.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
