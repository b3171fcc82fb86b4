use std::path::PathBuf;
use std::process::{Command, Output};

use sentifuse::dataset::{parse_manifest, DatasetStats};
use sentifuse::encoders::stable_hash;
use sentifuse_cli::run::sha256_hex;
use serde_json::Value;
use tempfile::TempDir;

const LABELS: [&str; 3] = ["positive", "neutral", "negative"];

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// `n` samples with balanced labels and a configuration whose stub
    /// backends plant the label in `clip_text`.
    fn new(n: usize, extra: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let mut manifest = String::new();
        for i in 0..n {
            manifest.push_str(&format!(
                "{{\"id\":\"s{i:04}\",\"text\":\"post {i} @friend http://t.co/x\",\"image\":\"s{i:04}.jpg\",\"label\":\"{}\"}}\n",
                LABELS[i % 3]
            ));
        }
        std::fs::write(dir.path().join("manifest.jsonl"), manifest).unwrap();
        let fx = Self { dir };
        fx.config(extra);
        fx
    }

    fn config(&self, extra: &str) {
        let text = format!(
            r#"[dataset]
manifest = "manifest.jsonl"
val_fraction = 0.2
test_fraction = 0.2

[backends]
text_main = {{ kind = "stub", version = "v1", output_dim = 4 }}
image_main = {{ kind = "stub", version = "v1", output_dim = 4 }}
clip_text = {{ kind = "stub", version = "v1", output_dim = 4, planted_amplitude = 8.0 }}
clip_image = {{ kind = "stub", version = "v1", output_dim = 4 }}
face = {{ kind = "stub", version = "v1", output_dim = 4, presence = "always" }}
object = {{ kind = "stub", version = "v1", output_dim = 4, presence = "never" }}
scene = {{ kind = "stub", version = "v1", output_dim = 4 }}
ocr = {{ kind = "stub", version = "v1", output_dim = 4, presence = "hash_even" }}

[fusion]
mlp_hidden = [16, 8]

[training]
learning_rate = 0.01
max_epochs = 4
{extra}
"#
        );
        std::fs::write(self.path("run.toml"), text).unwrap();
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_sentifuse"))
            .args(args)
            .arg("--config")
            .arg(self.path("run.toml"))
            .arg("--out")
            .arg(self.out())
            .env_remove("SENTIFUSE_CACHE")
            .env("RUST_LOG", "error")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.out().join(name)).unwrap()).unwrap()
    }
}

fn error_line(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("an error line");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {last}"))
}

#[test]
fn unknown_config_key_is_named_with_exit_code_2() {
    let fx = Fixture::new(6, "lerning_rate = 0.1");
    let out = fx.run(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_line(&out);
    assert_eq!(err["kind"], "config");
    assert_eq!(err["key"], "training.lerning_rate");
}

#[test]
fn missing_manifest_is_a_data_error() {
    let fx = Fixture::new(3, "");
    std::fs::remove_file(fx.path("manifest.jsonl")).unwrap();
    let out = fx.run(&["preprocess"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["kind"], "data");
}

#[test]
fn preprocess_reports_drops_and_is_idempotent() {
    let fx = Fixture::new(0, "");
    let manifest = concat!(
        "{\"id\":\"a\",\"text\":\"hi @bob www.x.org\",\"image\":\"a.jpg\",\"text_label\":\"positive\",\"image_label\":\"negative\"}\n",
        "{\"id\":\"b\",\"text\":\"fine\",\"image\":\"b.jpg\",\"text_label\":\"neutral\",\"image_label\":\"positive\"}\n",
        "{\"id\":\"c\",\"text\":\"meh @x\",\"image\":\"c.jpg\",\"text_label\":\"neutral\",\"image_label\":\"neutral\"}\n",
    );
    std::fs::write(fx.path("manifest.jsonl"), manifest).unwrap();
    fx.ok(&["preprocess"]);
    let drops = fx.json("drops.json");
    assert_eq!(drops["polarity_conflict"], 1);
    assert_eq!(drops["retained"], 2);
    let first = std::fs::read_to_string(fx.out().join("dataset.jsonl")).unwrap();
    let ds = parse_manifest(&first).unwrap();
    assert_eq!(ds.samples[0].label, 0);
    assert_eq!(ds.samples[1].text_norm, "meh @USER");

    std::fs::copy(fx.out().join("dataset.jsonl"), fx.path("manifest.jsonl")).unwrap();
    fx.ok(&["preprocess"]);
    let second = std::fs::read_to_string(fx.out().join("dataset.jsonl")).unwrap();
    assert_eq!(first, second);
    assert_eq!(fx.json("drops.json")["discarded"], 0);
}

#[test]
fn preprocess_of_empty_manifest_is_empty() {
    let fx = Fixture::new(0, "");
    fx.ok(&["preprocess"]);
    let drops = fx.json("drops.json");
    assert_eq!((drops["retained"].as_u64(), drops["discarded"].as_u64()), (Some(0), Some(0)));
    let out = std::fs::read_to_string(fx.out().join("dataset.jsonl")).unwrap();
    assert!(parse_manifest(&out).unwrap().is_empty());
}

#[test]
fn stats_needs_extract_then_matches_recount() {
    let fx = Fixture::new(12, "");
    let out = fx.run(&["stats"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("sentifuse extract"));

    fx.ok(&["extract"]);
    assert_eq!(fx.json("extract.json")["encode_calls"], 96);
    fx.ok(&["extract"]);
    assert_eq!(fx.json("extract.json")["encode_calls"], 0);
    assert_eq!(fx.json("extract.json")["cache_hits"], 96);

    fx.ok(&["stats"]);
    let stats: DatasetStats = serde_json::from_value(fx.json("stats.json")).unwrap();
    // Recount: face always present, object never, OCR when the id hash is even.
    let ocr: Vec<bool> = (0..12).map(|i| stable_hash(&[&format!("s{i:04}")]) % 2 == 0).collect();
    assert_eq!(stats.total, 12);
    assert_eq!(stats.overall.face, 100.0);
    assert_eq!(stats.overall.object, 0.0);
    assert_eq!(stats.overall.ocr, 100.0 * ocr.iter().filter(|&&p| p).count() as f64 / 12.0);
    for (c, class) in stats.per_class.iter().enumerate() {
        let n = (0..12).filter(|i| i % 3 == c && ocr[*i]).count();
        assert_eq!(class.class, LABELS[c]);
        assert_eq!(class.count, 4);
        assert_eq!(class.ratios.ocr, 100.0 * n as f64 / 4.0);
    }
    let table = std::fs::read_to_string(fx.out().join("stats.txt")).unwrap();
    assert_eq!(table, stats.to_table());
}

#[test]
fn single_sample_stats_are_all_or_nothing() {
    let fx = Fixture::new(1, "");
    fx.ok(&["stats", "--no-cache"]);
    let stats: DatasetStats = serde_json::from_value(fx.json("stats.json")).unwrap();
    for r in [stats.overall.face, stats.overall.object, stats.overall.ocr] {
        assert!(r == 0.0 || r == 100.0);
    }
}

#[test]
fn cache_root_follows_environment() {
    let fx = Fixture::new(3, "");
    let cache = fx.path("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_sentifuse"))
        .args(["extract", "--config"])
        .arg(fx.path("run.toml"))
        .arg("--out")
        .arg(fx.out())
        .env("SENTIFUSE_CACHE", &cache)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(cache.join("face.shard").exists());
    assert!(!fx.out().join("cache").exists());
}

#[test]
fn train_then_eval_on_validation_reproduces_best_f1() {
    let fx = Fixture::new(45, "");
    fx.ok(&["train"]);
    let train = fx.json("train.json");
    let best = train["result"]["best_epoch"].as_u64().unwrap() as usize;
    let best_f1 = train["result"]["history"][best - 1]["val_f1"].as_f64().unwrap();
    let log = std::fs::read_to_string(fx.out().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), train["result"]["history"].as_array().unwrap().len());

    let text = std::fs::read_to_string(fx.path("run.toml")).unwrap();
    std::fs::write(fx.path("run.toml"), format!("{text}\n[evaluation]\non = \"val\"\n")).unwrap();
    fx.ok(&["eval"]);
    let eval = fx.json("eval.json");
    assert_eq!(eval["part"], "val");
    let f1 = eval["metrics"]["weighted_f1"].as_f64().unwrap();
    assert!((f1 - best_f1).abs() <= 1e-9, "{f1} vs {best_f1}");
}

#[test]
fn single_modal_stage_trains_a_probe() {
    let fx = Fixture::new(30, "stage = \"single_modal_text\"");
    fx.ok(&["train"]);
    assert_eq!(fx.json("train.json")["stage"], "single_modal_text");
}

#[test]
fn eval_without_checkpoint_fails() {
    let fx = Fixture::new(30, "");
    let out = fx.run(&["eval"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(error_line(&out)["message"].as_str().unwrap().contains("missing checkpoint"));
}

#[test]
fn cv_emits_ten_folds_and_an_aggregate() {
    let fx = Fixture::new(60, "max_epochs = 2");
    let fx_text = std::fs::read_to_string(fx.path("run.toml")).unwrap().replace("max_epochs = 4\n", "");
    std::fs::write(fx.path("run.toml"), fx_text).unwrap();
    fx.ok(&["cv"]);
    let cv = fx.json("cv.json");
    assert_eq!(cv["k"], 10);
    assert_eq!(cv["folds"].as_array().unwrap().len(), 10);
    for key in ["mean_accuracy", "std_accuracy", "mean_f1", "std_f1"] {
        assert!(cv[key].is_f64(), "{key}");
    }
}

#[test]
fn ablate_lists_full_model_and_each_branch() {
    let fx = Fixture::new(30, "max_epochs = 1\n[evaluation]\nablate = [\"clip_text\", \"face\"]");
    let fx_text = std::fs::read_to_string(fx.path("run.toml")).unwrap().replace("max_epochs = 4\n", "");
    std::fs::write(fx.path("run.toml"), fx_text).unwrap();
    let table = fx.ok(&["ablate"]);
    let rows = fx.json("ablation.json")["rows"].as_array().unwrap().clone();
    let names: Vec<&str> = rows.iter().map(|r| r["removed"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "clip_text", "face"]);
    assert_eq!(rows[0]["delta_accuracy"], 0.0);
    assert!(table.contains("w/o clip_text"));
}

#[test]
fn artifacts_reference_their_run_manifest() {
    let fx = Fixture::new(30, "");
    fx.ok(&["train"]);
    let manifest = fx.json("train.manifest.json");
    let config = std::fs::read_to_string(fx.path("run.toml")).unwrap();
    assert_eq!(manifest["config_sha256"], sha256_hex(config.as_bytes()));
    assert_eq!(manifest["config"], config);
    assert_eq!(manifest["seeds"]["training"], 0);
    assert_eq!(manifest["backend_versions"]["ocr"], "v1");
    let run_id = manifest["run_id"].as_str().unwrap();
    for name in manifest["outputs"].as_array().unwrap() {
        assert!(fx.out().join(name.as_str().unwrap()).exists());
    }
    let train = fx.json("train.json");
    assert_eq!(train["run_manifest"], "train.manifest.json");
    assert_eq!(train["run_id"], run_id);
    let log = std::fs::read_to_string(fx.out().join("metrics.jsonl")).unwrap();
    for line in log.lines() {
        assert_eq!(serde_json::from_str::<Value>(line).unwrap()["run_id"], run_id);
    }
    let ckpt = sentifuse::fusion::load_checkpoint(&fx.out().join("checkpoint.ckpt")).unwrap();
    assert_eq!(ckpt.manifest.as_deref(), Some(format!("train.manifest.json#{run_id}").as_str()));
}

#[test]
fn inputs_are_not_modified() {
    let fx = Fixture::new(9, "");
    let before = std::fs::read(fx.path("manifest.jsonl")).unwrap();
    fx.ok(&["preprocess"]);
    fx.ok(&["extract"]);
    assert_eq!(std::fs::read(fx.path("manifest.jsonl")).unwrap(), before);
}
