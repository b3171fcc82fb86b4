use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, MetricsReport};
use crate::dataset::{carve_validation, Dataset, FoldPlan, Split};
use crate::encoders::{BranchId, FeatureBundle, NUM_BRANCHES};
use crate::fusion::{ablation_mask, Checkpoint, HeadSpec};
use crate::training::{evaluate, init_from_pretrained, train_stage, Example, Model, ModelSpec, TrainConfig, TrainResult};

/// Feature bundles with their labels, addressable by sample id.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    bundles: Vec<FeatureBundle>,
    labels: Vec<usize>,
    index: HashMap<String, usize>,
    classes: usize,
}

impl ExperimentData {
    /// Pairs every sample of `dataset` with its bundle.
    pub fn new(dataset: &Dataset, bundles: Vec<FeatureBundle>) -> Result<Self, EvalError> {
        let mut by_id: HashMap<String, FeatureBundle> = bundles.into_iter().map(|b| (b.sample_id.clone(), b)).collect();
        let mut out = Vec::with_capacity(dataset.len());
        let mut labels = Vec::with_capacity(dataset.len());
        for s in &dataset.samples {
            let b = by_id.remove(&s.id).ok_or_else(|| EvalError::MissingBundle(s.id.clone()))?;
            out.push(b);
            labels.push(s.label);
        }
        Ok(Self::from_parts(out, labels, dataset.num_classes()))
    }

    pub fn from_parts(bundles: Vec<FeatureBundle>, labels: Vec<usize>, classes: usize) -> Self {
        assert_eq!(bundles.len(), labels.len(), "one label per bundle");
        let index = bundles.iter().enumerate().map(|(i, b)| (b.sample_id.clone(), i)).collect();
        Self {
            bundles,
            labels,
            index,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }

    pub fn bundles(&self) -> &[FeatureBundle] {
        &self.bundles
    }

    pub fn bundles_mut(&mut self) -> &mut [FeatureBundle] {
        &mut self.bundles
    }

    /// Branch dims shared by every bundle.
    pub fn branch_dims(&self) -> Option<[usize; NUM_BRANCHES]> {
        self.bundles.first().map(FeatureBundle::dims)
    }

    pub fn examples(&self, ids: &[String]) -> Result<Vec<Example<'_>>, EvalError> {
        ids.iter()
            .map(|id| {
                let &i = self.index.get(id).ok_or_else(|| EvalError::MissingBundle(id.clone()))?;
                Ok(Example {
                    bundle: &self.bundles[i],
                    label: self.labels[i],
                })
            })
            .collect()
    }

    fn labeled<'a>(&'a self, ids: &'a [String]) -> Result<Vec<(&'a str, usize)>, EvalError> {
        ids.iter()
            .map(|id| {
                let &i = self.index.get(id).ok_or_else(|| EvalError::MissingBundle(id.clone()))?;
                Ok((id.as_str(), self.labels[i]))
            })
            .collect()
    }
}

/// Everything that defines one training run except the data partition and
/// the ablation mask.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub head: HeadSpec,
    pub train: TrainConfig,
    /// Share of each cross-validation remainder carved off for validation.
    pub val_fraction: f64,
    /// Single-modal checkpoints for the learnable branches.
    pub pretrained: Vec<(BranchId, Option<Checkpoint>)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: TrainResult,
    pub test: MetricsReport,
    pub model: Model<f32>,
}

/// Trains one multimodal model and scores it on `test_ids`.
pub fn run_experiment(
    data: &ExperimentData,
    spec: &ExperimentSpec,
    ablation: [bool; NUM_BRANCHES],
    train_ids: &[String],
    val_ids: &[String],
    test_ids: &[String],
) -> Result<RunOutcome, EvalError> {
    let branch_dims = data.branch_dims().ok_or(EvalError::Empty)?;
    let model_spec = ModelSpec::Multimodal {
        branch_dims,
        ablation,
        head: spec.head.clone(),
    };
    let mut model = Model::<f32>::new(model_spec, spec.train.seed)?;
    let sources: Vec<(BranchId, Option<&Checkpoint>)> = spec.pretrained.iter().map(|(b, c)| (*b, c.as_ref())).collect();
    init_from_pretrained(&mut model, &sources)?;
    let train = data.examples(train_ids)?;
    let val = data.examples(val_ids)?;
    let test = data.examples(test_ids)?;
    let result = train_stage(&mut model, &train, &val, &spec.train)?;
    let test = evaluate(&model, &test)?.metrics;
    Ok(RunOutcome { result, test, model })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

/// Mean and sample standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl CvReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:<6} {:>8} {:>8} {:>6}", "fold", "Acc", "F1", "best").unwrap();
        for f in &self.folds {
            writeln!(
                out,
                "{:<6} {:>8.4} {:>8.4} {:>6}",
                f.fold, f.test.accuracy, f.test.weighted_f1, f.best_epoch
            )
            .unwrap();
        }
        writeln!(
            out,
            "{:<6} {:>8.4} {:>8.4}\n{:<6} {:>8.4} {:>8.4}",
            "mean", self.mean_accuracy, self.mean_f1, "std", self.std_accuracy, self.std_f1
        )
        .unwrap();
        out
    }
}

/// k-fold cross-validation: fold `i` is the test set, validation is carved
/// from the remaining folds, the rest trains.
pub fn cross_validate(
    data: &ExperimentData,
    spec: &ExperimentSpec,
    plan: &FoldPlan,
    ablation: [bool; NUM_BRANCHES],
) -> Result<CvReport, EvalError> {
    let all_classes: BTreeSet<usize> = data.labels.iter().copied().collect();
    let folds: Vec<FoldReport> = (0..plan.k)
        .into_par_iter()
        .map(|i| {
            let test_ids = &plan.folds[i];
            let present: BTreeSet<usize> = data.labeled(test_ids)?.into_iter().map(|(_, l)| l).collect();
            if present != all_classes {
                log::warn!("fold {i} is missing classes {:?}", all_classes.difference(&present).collect::<Vec<_>>());
            }
            let remainder = plan.remainder(i);
            let (train_ids, val_ids) =
                carve_validation(&data.labeled(&remainder)?, spec.val_fraction, plan.seed.wrapping_add(i as u64));
            let run = run_experiment(data, spec, ablation, &train_ids, &val_ids, test_ids)?;
            Ok(FoldReport {
                fold: i,
                best_epoch: run.result.best_epoch,
                epochs_run: run.result.history.len(),
                test: run.test,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    let f1 = spec.train.f1_average;
    let (mean_accuracy, std_accuracy) = mean_std(&folds.iter().map(|f| f.test.accuracy).collect::<Vec<_>>());
    let (mean_f1, std_f1) = mean_std(&folds.iter().map(|f| f.test.f1(f1)).collect::<Vec<_>>());
    Ok(CvReport {
        k: plan.k,
        folds,
        mean_accuracy,
        std_accuracy,
        mean_f1,
        std_f1,
    })
}

/// How each ablation configuration is scored.
#[derive(Debug, Clone)]
pub enum AblationProtocol {
    /// One run on a fixed split, scored on its test part.
    Split(Split),
    /// Mean over k-fold cross-validation.
    Folds(FoldPlan),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Removed branch name, or `full`.
    pub removed: String,
    pub head: String,
    pub accuracy: f64,
    pub f1: f64,
    pub delta_accuracy: f64,
    pub delta_f1: f64,
}

/// Retrains with each listed branch removed in turn, plus the full model,
/// under identical seeds and settings. The first row is `full`.
pub fn run_ablation(
    data: &ExperimentData,
    spec: &ExperimentSpec,
    protocol: &AblationProtocol,
    removed: &[String],
) -> Result<Vec<AblationRow>, EvalError> {
    let mut configs: Vec<Option<BranchId>> = vec![None];
    for name in removed {
        let b = BranchId::from_name(name).ok_or_else(|| EvalError::UnknownBranch(name.clone()))?;
        configs.push(Some(b));
    }
    let scores: Vec<(f64, f64)> = configs
        .par_iter()
        .map(|removed| {
            let mask = ablation_mask(removed.as_slice());
            match protocol {
                AblationProtocol::Split(s) => {
                    let run = run_experiment(data, spec, mask, &s.train, &s.val, &s.test)?;
                    Ok((run.test.accuracy, run.test.f1(spec.train.f1_average)))
                }
                AblationProtocol::Folds(plan) => {
                    let cv = cross_validate(data, spec, plan, mask)?;
                    Ok((cv.mean_accuracy, cv.mean_f1))
                }
            }
        })
        .collect::<Result<_, EvalError>>()?;
    let (full_acc, full_f1) = scores[0];
    Ok(configs
        .iter()
        .zip(scores)
        .map(|(b, (accuracy, f1))| AblationRow {
            removed: b.map_or_else(|| "full".to_string(), |b| b.name().to_string()),
            head: spec.head.kind_name().to_string(),
            accuracy,
            f1,
            delta_accuracy: accuracy - full_acc,
            delta_f1: f1 - full_f1,
        })
        .collect())
}

/// Human-readable ablation table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<14} {:<12} {:>8} {:>8} {:>8} {:>8}", "model", "head", "Acc", "F1", "dAcc", "dF1").unwrap();
    for r in rows {
        let name = if r.removed == "full" { "full".to_string() } else { format!("w/o {}", r.removed) };
        writeln!(
            out,
            "{:<14} {:<12} {:>8.4} {:>8.4} {:>+8.4} {:>+8.4}",
            name, r.head, r.accuracy, r.f1, r.delta_accuracy, r.delta_f1
        )
        .unwrap();
    }
    out
}
