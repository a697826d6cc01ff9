use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use atlab_core::data::{load_experiment, load_manifest};
use atlab_core::detector::checkpoint::Archive;
use atlab_core::experiment::ExperimentConfig;
use atlab_core::training::{supervised_archive, SupervisedState};

const MICRO: &str = r#"
schema_version = 1

[scene]
image_size = 32
objects_per_image = [1, 2]
object_scale = [8.0, 16.0]
seed = 4

[splits]
n_source = 8
n_target = 8
n_test = 4

[arch]
image_size = 32
num_classes = 3
encoder_channels = [2, 3, 4, 4]
rpn_hidden = 4
anchor_scales = [8.0, 16.0]
roi_pool = 2
roi_hidden = 4
discriminator_hidden = 3

[train]
burn_in_iterations = 3
adapt_iterations = 6
batch_source = 2
batch_target = 2
confidence_threshold = 0.3
eval_every = 2
checkpoint_every = 2
seed = 4
"#;

fn atlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atlab")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = atlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    atlab(args).status.code().unwrap()
}

struct Exp {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Exp {
    fn new(config_text: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("micro.toml");
        fs::write(&config, config_text).unwrap();
        let root = tmp.path().join("exp");
        Self { _tmp: tmp, root, config }
    }

    fn args<'a>(&'a self, verb: &[&'a str]) -> Vec<&'a str> {
        let mut v = verb.to_vec();
        v.extend(["--out", self.root.to_str().unwrap(), "--config", self.config.to_str().unwrap()]);
        v
    }

    fn run(&self, verb: &[&str]) -> Output {
        ok(&self.args(verb))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        fs::read(self.path(rel)).unwrap()
    }
}

fn prepared() -> Exp {
    let e = Exp::new(MICRO);
    e.run(&["gen-data"]);
    e.run(&["pretrain"]);
    e
}

#[test]
fn gen_data_manifest_is_reproducible() {
    let e = Exp::new(MICRO);
    e.run(&["gen-data"]);
    let m1 = load_manifest(&e.path("datasets")).unwrap();
    assert_eq!(m1.splits["source_train"].count, 8);
    assert_eq!(m1.splits["target_train"].count, 8);
    assert_eq!(m1.splits["target_test"].count, 4);
    assert!(e.path("config.toml").exists());
    assert_eq!(code(&e.args(&["gen-data"])), 2);
    e.run(&["gen-data", "--force"]);
    assert_eq!(load_manifest(&e.path("datasets")).unwrap(), m1);
    let data = load_experiment(&e.path("datasets")).unwrap();
    assert!(data.target_train.items.iter().all(|i| i.annotations.is_empty()));
    for ds in [&data.source_train, &data.target_train, &data.source_test, &data.target_test] {
        ds.check_invariants().unwrap();
    }
}

#[test]
fn pretrain_is_deterministic_and_checkpoint_loads() {
    let a = prepared();
    let b = prepared();
    assert_eq!(a.read("checkpoints/pretrain.ckpt"), b.read("checkpoints/pretrain.ckpt"));
    assert_eq!(a.read("pretrain_metrics.log"), b.read("pretrain_metrics.log"));
    let cfg = ExperimentConfig::load(&a.config).unwrap();
    Archive::load_checked(&a.path("checkpoints/pretrain.ckpt"), &cfg.arch.fingerprint()).unwrap();
    assert_eq!(code(&a.args(&["pretrain"])), 2);
}

#[test]
fn zero_iteration_pretrain_emits_initial_weights() {
    let e = Exp::new(&MICRO.replace("burn_in_iterations = 3", "burn_in_iterations = 0"));
    e.run(&["gen-data"]);
    e.run(&["pretrain"]);
    let cfg = ExperimentConfig::load(&e.config).unwrap();
    let init = supervised_archive(&SupervisedState::init(&cfg.recipe()).unwrap());
    assert_eq!(e.read("checkpoints/pretrain.ckpt"), init.to_bytes().unwrap());
}

#[test]
fn adapt_resume_and_eval() {
    let full = prepared();
    full.run(&["adapt"]);
    let log = String::from_utf8(full.read("metrics.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(full.path("checkpoints/adapt_000002.ckpt").exists());
    assert!(full.path("checkpoints/adapt_final.ckpt").exists());

    let split = prepared();
    split.run(&["adapt", "--stop-at", "3"]);
    assert_eq!(String::from_utf8(split.read("metrics.log")).unwrap().lines().count(), 3);
    let ckpt = split.path("checkpoints/adapt_000003.ckpt");
    split.run(&["adapt", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(split.read("metrics.log"), full.read("metrics.log"));
    assert_eq!(split.read("checkpoints/adapt_final.ckpt"), full.read("checkpoints/adapt_final.ckpt"));

    let out = full.run(&["eval", "--split", "target_test", "--which", "student"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mAP"));
    full.run(&["eval", "--split", "source_test", "--which", "teacher"]);
    let report: serde_json::Value = serde_json::from_slice(&full.read("reports/eval_adapt_final_target_test_student.json")).unwrap();
    let manifest = load_manifest(&full.path("datasets")).unwrap();
    assert_eq!(report["result"]["split_fingerprint"].as_str().unwrap(), manifest.splits["target_test"].fingerprint);
    assert_eq!(code(&full.args(&["eval", "--split", "nowhere"])), 1);

    full.run(&["curves"]);
    let eval_csv = String::from_utf8(full.read("curves/eval.csv")).unwrap();
    assert_eq!(eval_csv.lines().count(), 1 + 3);
    assert!(full.path("curves/map.svg").exists());
}

#[test]
fn dry_run_writes_nothing() {
    let e = Exp::new(MICRO);
    e.run(&["gen-data", "--dry-run"]);
    assert!(!e.root.exists());
    let e = prepared();
    e.run(&["adapt", "--dry-run"]);
    assert!(!e.path("metrics.log").exists());
}

#[test]
fn ablation_grid_and_curves() {
    let e = prepared();
    let out = e.run(&["ablate"]);
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    let report: serde_json::Value = serde_json::from_slice(&e.read("reports/ablation.json")).unwrap();
    let names: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["source_only", "oracle", "full_at", "no_dis", "no_ws_aug", "no_mutual", "lambda_dis=0", "lambda_dis=0.05", "lambda_dis=0.1"]);
    for n in &names {
        assert!(table.contains(n));
    }
    let row = |n: &str| report["rows"].as_array().unwrap().iter().find(|r| r["name"] == n).unwrap()["outcome"]["Ok"].clone();
    let (zero, no_dis) = (row("lambda_dis=0"), row("no_dis"));
    assert_eq!(zero["student"], no_dis["student"]);
    assert_eq!(zero["teacher"], no_dis["teacher"]);
    assert_eq!(e.read("curves/lambda_dis_0_loss.csv"), e.read("curves/no_dis_loss.csv"));
    let sweep = String::from_utf8(e.read("curves/lambda_sweep_map.svg")).unwrap();
    assert_eq!(sweep.matches("<polyline").count(), 3);
    assert!(e.path("curves/ablation_fp_ratio.svg").exists());
    assert!(e.path("checkpoints/ablation/oracle.ckpt").exists());
    assert_eq!(row("oracle")["audit"].as_array().unwrap()[2].as_u64().unwrap(), 8);
    assert_eq!(row("source_only")["audit"].as_array().unwrap()[1].as_u64().unwrap(), 0);
}

#[test]
fn usage_and_config_errors() {
    assert_eq!(code(&["frobnicate"]), 1);
    let bad = Exp::new(&format!("{MICRO}\n[bogus]\nx = 1\n"));
    assert_eq!(code(&bad.args(&["gen-data"])), 1);
    let e = prepared();
    // A different seed contradicts the snapshot.
    let mut args = e.args(&["adapt"]);
    args.extend(["--seed", "99"]);
    assert_eq!(code(&args), 1);
}

#[test]
fn fingerprint_mismatch_is_a_data_error() {
    let e = prepared();
    let other = Exp::new(&MICRO.replace("rpn_hidden = 4", "rpn_hidden = 5"));
    let ckpt = e.path("checkpoints/pretrain.ckpt");
    other.run(&["gen-data"]);
    assert_eq!(code(&other.args(&["adapt", "--init", ckpt.to_str().unwrap()])), 2);
}

#[test]
fn divergence_exits_with_numerical_code() {
    let e = Exp::new(&MICRO.replace("[train]\n", "[train]\nlr = 1e30\n"));
    e.run(&["gen-data"]);
    let out = atlab(&e.args(&["pretrain"]));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
