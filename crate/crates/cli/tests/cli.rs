use std::path::Path;
use std::process::Command;

use bestformer_cli::commands::{bench, Split};
use bestformer_cli::{eval, inspect, pack_teacher_logits, train, RunConfig, TeacherSource};
use bestformer_core::data::{write_raw, Dataset, DatasetSpec, SyntheticSpec};
use bestformer_core::metrics::config_size_mb;
use bestformer_core::model::{load_checkpoint, ModelConfig};
use bestformer_core::numeric::Tensor;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bestformer"));
    c.env("BESTFORMER_LOG", "warn").env_remove("RUST_BACKTRACE");
    c
}

fn small(out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        epochs,
        out_dir: out.to_path_buf(),
        dataset: DatasetSpec::SyntheticGaussianClusters(SyntheticSpec {
            train_size: 60,
            test_size: 30,
            ..Default::default()
        }),
        ..RunConfig::default()
    };
    cfg.metrics.probe_batch = 16;
    cfg
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, "epochs = 0\n").unwrap();
    let out = dir.path().join("out");
    let st = bin()
        .args(["--config", cfg_path.to_str().unwrap(), "--out", out.to_str().unwrap(), "train"])
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(st.success());
    let m = load_checkpoint(&out.join("checkpoints/epoch_0000.ckpt")).unwrap();
    assert_eq!(m.config(), &RunConfig::default().model);
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap(), "");
    assert!(out.join("summary.json").is_file());
}

#[test]
fn missing_dataset_fails_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--out", dir.path().to_str().unwrap(), "--dataset", "/definitely/missing.csv", "train"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dataset.path"), "{err}");
}

#[test]
fn malformed_config_fails_with_the_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[optimizer]\nlearning_rate = 0.1\n").unwrap();
    let out = bin().args(["--config", p.to_str().unwrap(), "train"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn effective_config_reparses_to_the_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 1);
    train(&cfg).unwrap();
    let back = RunConfig::load(&dir.path().join("effective_config.toml")).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn eval_is_repeatable_and_uses_the_shared_size_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 1);
    train(&cfg).unwrap();
    let ck = dir.path().join("checkpoints/epoch_0001.ckpt");
    let a = eval(&cfg, &ck, Split::Test).unwrap();
    let first = std::fs::read(dir.path().join("eval.json")).unwrap();
    let b = eval(&cfg, &ck, Split::Test).unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("eval.json")).unwrap());
    assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
    assert_eq!(a.cost.model_size_mb, config_size_mb(&cfg.model));
}

#[test]
fn overfit_single_sample_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let x = vec![0.7f32; 64].into_iter().chain((0..64).map(|i| i as f32 / 32.0 - 1.0)).collect();
    let ds = Dataset::new(Tensor::new(&[2, 64], x).unwrap(), vec![3, 3], vec![0, 1], 10).unwrap();
    let raw = dir.path().join("one.bds");
    write_raw(&ds, &raw).unwrap();
    let mut cfg = small(dir.path(), 30);
    cfg.batch_size = 1;
    cfg.dataset = DatasetSpec::RawTensorBinary { path: raw, train_size: 1 };
    cfg.metrics.probe_batch = 1;
    train(&cfg).unwrap();
    let r = eval(&cfg, &dir.path().join("checkpoints/epoch_0030.ckpt"), Split::Train).unwrap();
    assert_eq!(r.accuracy, 1.0);
}

#[test]
fn class_count_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 0);
    train(&cfg).unwrap();
    let mut other = cfg.clone();
    other.dataset = DatasetSpec::SyntheticGaussianClusters(SyntheticSpec {
        num_classes: 4,
        train_size: 8,
        test_size: 8,
        ..Default::default()
    });
    let e = eval(&other, &dir.path().join("checkpoints/epoch_0000.ckpt"), Split::Test).unwrap_err();
    assert!(format!("{e:#}").contains("data error"), "{e:#}");
}

#[test]
fn one_block_model_inspects_to_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path(), 0);
    cfg.model = ModelConfig::vector(1, 32, 2, 10, 4, 16);
    train(&cfg).unwrap();
    let recs = inspect(&cfg, &dir.path().join("checkpoints/epoch_0000.ckpt"), 4).unwrap();
    assert_eq!(recs.len(), 1);
    let lines = std::fs::read_to_string(dir.path().join("inspect.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
}

#[test]
fn cached_teacher_logits_drive_distillation() {
    let dir = tempfile::tempdir().unwrap();
    let mut tcfg = small(&dir.path().join("teacher"), 1);
    tcfg.model = tcfg.model.full_precision_counterpart();
    train(&tcfg).unwrap();
    let ck = dir.path().join("teacher/checkpoints/epoch_0001.ckpt");
    let cache = pack_teacher_logits(&tcfg, &ck).unwrap();

    let mut scfg = small(&dir.path().join("student"), 1);
    scfg.teacher = TeacherSource::LogitsCache { path: cache };
    train(&scfg).unwrap();
    let rec: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(dir.path().join("student/metrics.jsonl")).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    assert!(rec["ce_distill"].as_f64().unwrap() > 0.0);

    // the cache is tied to the split it was computed on
    let mut shifted = scfg.clone();
    shifted.dataset = DatasetSpec::SyntheticGaussianClusters(SyntheticSpec {
        train_size: 60,
        test_size: 30,
        seed: 1,
        ..Default::default()
    });
    assert!(train(&shifted).is_err());
}

#[test]
fn bench_reports_exact_memory_ratios() {
    let rows = bench(&[(512, 512), (1, 65)], 4, 1, 0).unwrap();
    assert_eq!(rows[0].memory_ratio, 32.0);
    assert_eq!(rows[1].memory_ratio, 65.0 * 32.0 / (2.0 * 64.0));
    assert!(rows.iter().all(|r| r.outputs_equal));
}
