use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sentifuse::dataset::{compute_stats, load_manifest, make_folds, make_split, write_manifest, write_split, Dataset, Split};
use sentifuse::encoders::{BranchId, FeatureBundle, Registry};
use sentifuse::evaluation::{
    ablation_table, cross_validate, run_ablation, run_experiment, AblationProtocol, ExperimentData, ExperimentSpec,
    MetricsReport,
};
use sentifuse::featurestore::{materialize_bundles, CacheKey, FeatureStore, CACHE_ROOT_ENV};
use sentifuse::fusion::{load_checkpoint, save_checkpoint, Checkpoint};
use sentifuse::training::{evaluate, train_stage, Model, ModelSpec, Stage, TrainConfig, TrainResult};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{parse_config, resolve, EvalPart, ProtocolKind, RunConfig};
use crate::error::CliError;
use crate::run::{sha256_hex, RunManifest, Seeds};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Preprocess,
    Stats,
    Extract,
    Train,
    Eval,
    Ablate,
    Cv,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Preprocess => "preprocess",
            Command::Stats => "stats",
            Command::Extract => "extract",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Cv => "cv",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: PathBuf,
    pub out: PathBuf,
    pub no_cache: bool,
}

/// Result of a successful command: its manifest and a human-readable summary.
#[derive(Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub summary: String,
}

struct Ctx<'a> {
    cfg: RunConfig,
    text: String,
    base: PathBuf,
    inv: &'a Invocation,
    command: Command,
    run_id: String,
    started_at: String,
    outputs: Vec<String>,
}

pub fn run(command: Command, inv: &Invocation) -> Result<Outcome, CliError> {
    let text = std::fs::read_to_string(&inv.config)
        .map_err(|e| CliError::config("", format!("cannot read {}: {e}", inv.config.display())))?;
    let cfg = parse_config(&text)?;
    let base = inv
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let started_at = chrono::Utc::now().to_rfc3339();
    let run_id = sha256_hex(format!("{}\n{}\n{started_at}", command.name(), sha256_hex(text.as_bytes())).as_bytes())
        [..16]
        .to_string();
    std::fs::create_dir_all(&inv.out).map_err(|e| CliError::io(&inv.out, e))?;
    let mut ctx = Ctx {
        cfg,
        text,
        base,
        inv,
        command,
        run_id,
        started_at,
        outputs: Vec::new(),
    };
    let summary = match command {
        Command::Preprocess => preprocess(&mut ctx)?,
        Command::Stats => stats(&mut ctx)?,
        Command::Extract => extract(&mut ctx)?,
        Command::Train => train(&mut ctx)?,
        Command::Eval => eval(&mut ctx)?,
        Command::Ablate => ablate(&mut ctx)?,
        Command::Cv => cv(&mut ctx)?,
    };
    let manifest = ctx.finish()?;
    Ok(Outcome { manifest, summary })
}

impl Ctx<'_> {
    fn manifest_name(&self) -> String {
        RunManifest::file_name(self.command.name())
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.inv.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out_path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    /// Writes `value` as a JSON object tagged with this run's manifest.
    fn write_json(&mut self, name: &str, value: impl Serialize) -> Result<(), CliError> {
        let mut v = serde_json::to_value(value).map_err(CliError::runtime)?;
        let obj = v.as_object_mut().expect("artifacts are JSON objects");
        obj.insert("run_manifest".into(), Value::String(self.manifest_name()));
        obj.insert("run_id".into(), Value::String(self.run_id.clone()));
        let text = serde_json::to_string_pretty(&v).map_err(CliError::runtime)?;
        self.write(name, text.as_bytes())
    }

    fn cache_root(&self) -> PathBuf {
        if let Some(root) = std::env::var_os(CACHE_ROOT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(root);
        }
        match &self.cfg.dataset.cache {
            Some(p) => resolve(&self.base, p),
            None => self.inv.out.join("cache"),
        }
    }

    fn store(&self) -> Result<Option<FeatureStore>, CliError> {
        if self.inv.no_cache {
            return Ok(None);
        }
        Ok(Some(FeatureStore::open(self.cache_root())?))
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        let path = resolve(&self.base, &self.cfg.dataset.manifest);
        let mut ds = load_manifest(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        if let Some(c) = self.cfg.dataset.corpus {
            if c != ds.corpus {
                return Err(CliError::config(
                    "dataset.corpus",
                    format!("manifest declares `{}`", ds.corpus.name()),
                ));
            }
        }
        ds.normalize_text(&self.cfg.normalization);
        Ok(ds)
    }

    fn registry(&self) -> Result<Registry, CliError> {
        Ok(Registry::from_specs(&self.cfg.backends, &self.base)?)
    }

    fn bundles(&self, ds: &Dataset) -> Result<Vec<FeatureBundle>, CliError> {
        let registry = self.registry()?;
        let store = self.store()?;
        Ok(materialize_bundles(store.as_ref(), &ds.samples, &registry, false)?.bundles)
    }

    fn split(&self, ds: &Dataset) -> Result<Split, CliError> {
        let d = &self.cfg.dataset;
        Ok(make_split(ds, d.val_fraction, d.test_fraction, d.split_seed)?)
    }

    fn train_config(&self, ds: &Dataset) -> Result<TrainConfig, CliError> {
        self.cfg.train_config(ds.corpus)
    }

    fn experiment_spec(&self, ds: &Dataset) -> Result<ExperimentSpec, CliError> {
        let train = self.train_config(ds)?;
        if train.stage != Stage::Multimodal {
            return Err(CliError::config(
                "training.stage",
                format!("`{}` needs the multimodal stage", self.command.name()),
            ));
        }
        let head = self.cfg.head_spec(ds.num_classes(), train.dropout)?;
        let mut pretrained = Vec::new();
        for (name, path) in &self.cfg.training.pretrained {
            let branch = BranchId::from_name(name).expect("validated");
            pretrained.push((branch, Some(self.load_checkpoint(path)?)));
        }
        Ok(ExperimentSpec {
            head,
            train,
            val_fraction: self.cfg.evaluation.cv_val_fraction,
            pretrained,
        })
    }

    fn load_checkpoint(&self, path: &Path) -> Result<Checkpoint, CliError> {
        let path = resolve(&self.base, path);
        if !path.exists() {
            return Err(CliError::data(format!("missing checkpoint {}", path.display())));
        }
        load_checkpoint(&path).map_err(|e| CliError::data(e))
    }

    fn finish(self) -> Result<RunManifest, CliError> {
        let name = self.manifest_name();
        let train_seed = self.cfg.training.seed.unwrap_or(0);
        let cache = (!self.inv.no_cache && matches!(self.command, Command::Stats | Command::Extract | Command::Train | Command::Eval | Command::Ablate | Command::Cv))
            .then(|| self.cache_root().display().to_string());
        let manifest = RunManifest {
            tool: format!("sentifuse {}", env!("CARGO_PKG_VERSION")),
            command: self.command.name().to_string(),
            run_id: self.run_id.clone(),
            config_path: self.inv.config.display().to_string(),
            config_sha256: sha256_hex(self.text.as_bytes()),
            config: self.text.clone(),
            seeds: Seeds {
                training: train_seed,
                split: self.cfg.dataset.split_seed,
                folds: self.cfg.evaluation.fold_seed,
            },
            backend_versions: self.cfg.backend_versions(),
            normalization: self.cfg.normalization.clone(),
            cache,
            outputs: self.outputs.clone(),
            started_at: self.started_at.clone(),
            finished_at: chrono::Utc::now().to_rfc3339(),
        };
        let path = self.out_path(&name);
        let text = serde_json::to_string_pretty(&manifest).map_err(CliError::runtime)?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(manifest)
    }
}

fn preprocess(ctx: &mut Ctx) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    ctx.write("dataset.jsonl", write_manifest(&ds).as_bytes())?;
    let drops = ds.drops;
    ctx.write_json(
        "drops.json",
        json!({
            "retained": ds.len(),
            "discarded": drops.total(),
            "polarity_conflict": drops.polarity_conflict,
            "no_majority": drops.no_majority,
        }),
    )?;
    Ok(format!(
        "retained {} samples; discarded {} (polarity conflict {}, no majority {})",
        ds.len(),
        drops.total(),
        drops.polarity_conflict,
        drops.no_majority
    ))
}

fn stats(ctx: &mut Ctx) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let bundles: HashMap<String, FeatureBundle> = match ctx.store()? {
        None => ctx.bundles(&ds)?.into_iter().map(|b| (b.sample_id.clone(), b)).collect(),
        Some(store) => cached_bundles(ctx, &store, &ds)?,
    };
    let stats = compute_stats(&ds, &bundles)?;
    let table = stats.to_table();
    ctx.write_json("stats.json", &stats)?;
    ctx.write("stats.txt", table.as_bytes())?;
    Ok(table)
}

/// Bundles read from the cache alone; nothing is encoded.
fn cached_bundles(ctx: &Ctx, store: &FeatureStore, ds: &Dataset) -> Result<HashMap<String, FeatureBundle>, CliError> {
    let versions = ctx.cfg.backend_versions();
    let mut out = HashMap::with_capacity(ds.len());
    for s in &ds.samples {
        let mut records = Vec::with_capacity(BranchId::ALL.len());
        for b in BranchId::ALL {
            let key = CacheKey::new(&s.id, b, &versions[b.name()])?;
            let record = store.get(&key)?.ok_or_else(|| {
                CliError::data(format!("features for `{key}` are not cached; run `sentifuse extract` first"))
            })?;
            records.push(record);
        }
        let bundle = FeatureBundle::new(s.id.clone(), records)?;
        out.insert(s.id.clone(), bundle);
    }
    Ok(out)
}

fn extract(ctx: &mut Ctx) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let registry = ctx.registry()?;
    let store = ctx.store()?;
    let m = materialize_bundles(store.as_ref(), &ds.samples, &registry, ctx.cfg.dataset.keep_going)?;
    let failures: Vec<Value> = m
        .failures
        .iter()
        .map(|(id, e)| json!({ "id": id, "error": e.to_string() }))
        .collect();
    ctx.write_json(
        "extract.json",
        json!({
            "samples": ds.len(),
            "extracted": m.bundles.len(),
            "encode_calls": m.encode_calls,
            "cache_hits": m.cache_hits,
            "failures": failures,
        }),
    )?;
    Ok(format!(
        "extracted {} of {} samples; {} encode calls, {} cache hits, {} failures",
        m.bundles.len(),
        ds.len(),
        m.encode_calls,
        m.cache_hits,
        m.failures.len()
    ))
}

#[derive(Serialize)]
struct TrainReport<'a> {
    stage: Stage,
    config: &'a TrainConfig,
    parameters: usize,
    result: &'a TrainResult,
    test: &'a MetricsReport,
}

fn train(ctx: &mut Ctx) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let config = ctx.train_config(&ds)?;
    let data = ExperimentData::new(&ds, ctx.bundles(&ds)?)?;
    let split = ctx.split(&ds)?;
    ctx.write("split.txt", write_split(&split).as_bytes())?;

    let (result, model, test) = match config.stage {
        Stage::Multimodal => {
            let spec = ctx.experiment_spec(&ds)?;
            let run = run_experiment(&data, &spec, ctx.cfg.ablation(), &split.train, &split.val, &split.test)?;
            (run.result, run.model, run.test)
        }
        stage => {
            let branch = if stage == Stage::SingleModalText { BranchId::TextMain } else { BranchId::ImageMain };
            let spec = ModelSpec::Probe {
                branch,
                dim: ctx.cfg.backends[branch.name()].output_dim,
                classes: ds.num_classes(),
                dropout: config.dropout,
            };
            let mut model = Model::<f32>::new(spec, config.seed)?;
            let result = train_stage(&mut model, &data.examples(&split.train)?, &data.examples(&split.val)?, &config)?;
            let test = evaluate(&model, &data.examples(&split.test)?)?.metrics;
            (result, model, test)
        }
    };

    let mut log = String::new();
    for r in &result.history {
        let mut v = serde_json::to_value(r).map_err(CliError::runtime)?;
        v["run_id"] = Value::String(ctx.run_id.clone());
        writeln!(log, "{v}").unwrap();
    }
    ctx.write("metrics.jsonl", log.as_bytes())?;

    let ckpt = model.to_checkpoint(config.seed, Some(format!("{}#{}", ctx.manifest_name(), ctx.run_id)));
    let path = ctx.out_path("checkpoint.ckpt");
    save_checkpoint(&path, &ckpt).map_err(|e| CliError::io(&path, e))?;
    ctx.outputs.push("checkpoint.ckpt".into());

    let mut result = result;
    result.checkpoint = Some("checkpoint.ckpt".into());
    ctx.write_json(
        "train.json",
        TrainReport {
            stage: config.stage,
            config: &config,
            parameters: model.param_count(),
            result: &result,
            test: &test,
        },
    )?;
    let best = result.best();
    Ok(format!(
        "best epoch {} of {}: val acc {:.4} val F1 {:.4}; test acc {:.4} F1 {:.4}",
        result.best_epoch,
        result.history.len(),
        best.val_accuracy,
        best.val_f1,
        test.accuracy,
        test.f1(config.f1_average)
    ))
}

fn eval(ctx: &mut Ctx) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let ckpt_path = ctx
        .cfg
        .evaluation
        .checkpoint
        .clone()
        .unwrap_or_else(|| ctx.inv.out.join("checkpoint.ckpt"));
    let ckpt = ctx.load_checkpoint(&ckpt_path)?;
    let model = Model::<f32>::from_checkpoint(&ckpt)?;
    if model.classes() != ds.num_classes() {
        return Err(CliError::data(format!(
            "checkpoint has {} classes, dataset has {}",
            model.classes(),
            ds.num_classes()
        )));
    }
    let data = ExperimentData::new(&ds, ctx.bundles(&ds)?)?;
    let split = ctx.split(&ds)?;
    let (part, ids) = match ctx.cfg.evaluation.on {
        EvalPart::Val => ("val", &split.val),
        EvalPart::Test => ("test", &split.test),
    };
    let e = evaluate(&model, &data.examples(ids)?)?;
    let predictions: Vec<Value> = ids
        .iter()
        .zip(&e.predictions)
        .map(|(id, p)| json!({ "id": id, "prediction": ds.corpus.class_name(*p) }))
        .collect();
    let f1 = ctx.train_config(&ds).map(|c| c.f1_average).unwrap_or_default();
    ctx.write_json(
        "eval.json",
        json!({
            "part": part,
            "checkpoint": ckpt_path.display().to_string(),
            "loss": e.loss,
            "metrics": e.metrics,
            "predictions": predictions,
        }),
    )?;
    Ok(format!(
        "{part}: {} samples, loss {:.4}, acc {:.4}, F1 {:.4}",
        ids.len(),
        e.loss,
        e.metrics.accuracy,
        e.metrics.f1(f1)
    ))
}

fn ablate(ctx: &mut Ctx) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let spec = ctx.experiment_spec(&ds)?;
    let data = ExperimentData::new(&ds, ctx.bundles(&ds)?)?;
    let protocol = match ctx.cfg.evaluation.protocol {
        ProtocolKind::Split => AblationProtocol::Split(ctx.split(&ds)?),
        ProtocolKind::Folds => {
            AblationProtocol::Folds(make_folds(&ds, ctx.cfg.evaluation.folds, ctx.cfg.evaluation.fold_seed)?)
        }
    };
    let rows = run_ablation(&data, &spec, &protocol, &ctx.cfg.ablate_list())?;
    let table = ablation_table(&rows);
    ctx.write_json("ablation.json", json!({ "rows": rows }))?;
    ctx.write("ablation.txt", table.as_bytes())?;
    Ok(table)
}

fn cv(ctx: &mut Ctx) -> Result<String, CliError> {
    let ds = ctx.dataset()?;
    let spec = ctx.experiment_spec(&ds)?;
    let data = ExperimentData::new(&ds, ctx.bundles(&ds)?)?;
    let plan = make_folds(&ds, ctx.cfg.evaluation.folds, ctx.cfg.evaluation.fold_seed)?;
    let report = cross_validate(&data, &spec, &plan, ctx.cfg.ablation())?;
    let table = report.to_table();
    ctx.write_json("cv.json", &report)?;
    ctx.write("cv.txt", table.as_bytes())?;
    Ok(table)
}
