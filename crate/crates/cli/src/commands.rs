use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use bestformer_core::binary::{BinaryLinear, PackedBits, StandardizeMode, WeightMode};
use bestformer_core::data::{Dataset, DatasetSpec};
use bestformer_core::learn::{
    evaluate, train_epoch, AdamW, CosineSchedule, LogitsCache, Teacher,
};
use bestformer_core::metrics::{cost_report, rep_cap, CostReport, RepCapOptions, RepCapReport};
use bestformer_core::model::{load_checkpoint, save_checkpoint, Model};
use bestformer_core::numeric::{Rng, Tensor};
use log::info;
use serde::Serialize;

use crate::config::{RunConfig, TeacherSource};

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub format: Option<DataFormat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    LabeledCsv,
    RawTensorBinary,
}

impl std::str::FromStr for DataFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "labeled_csv" | "csv" => Ok(Self::LabeledCsv),
            "raw_tensor_binary" | "raw" => Ok(Self::RawTensorBinary),
            _ => Err(format!("unknown dataset format {s:?} (labeled_csv, raw_tensor_binary)")),
        }
    }
}

fn train_size(spec: &DatasetSpec) -> usize {
    match spec {
        DatasetSpec::SyntheticGaussianClusters(s) => s.train_size,
        DatasetSpec::LabeledCsv { train_size, .. } | DatasetSpec::RawTensorBinary { train_size, .. } => {
            *train_size
        }
    }
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        let Some(path) = &self.dataset else {
            ensure!(self.format.is_none(), "--format needs --dataset");
            return Ok(());
        };
        let format = self.format.unwrap_or(
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
                DataFormat::LabeledCsv
            } else {
                DataFormat::RawTensorBinary
            },
        );
        let n = train_size(&cfg.dataset);
        cfg.dataset = match format {
            DataFormat::LabeledCsv => DatasetSpec::LabeledCsv {
                path: path.clone(),
                num_classes: cfg.model.num_classes,
                train_size: n,
                sample_shape: match &cfg.dataset {
                    DatasetSpec::LabeledCsv { sample_shape, .. } => sample_shape.clone(),
                    _ => None,
                },
            },
            DataFormat::RawTensorBinary => DatasetSpec::RawTensorBinary {
                path: path.clone(),
                train_size: n,
            },
        };
        Ok(())
    }
}

/// Loads the dataset and checks it against the model's input shape and classes.
fn load_data(cfg: &RunConfig, model_cfg: &bestformer_core::model::ModelConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = cfg.dataset.load().context("loading dataset")?;
    for (name, d) in [("train", &train), ("test", &test)] {
        if d.num_classes() != model_cfg.num_classes {
            bail!(
                "data error: {name} split has {} classes, model has {}",
                d.num_classes(),
                model_cfg.num_classes
            );
        }
        let want = model_cfg.stem.sample_shape();
        if !d.is_empty() && d.sample_shape() != want.as_slice() {
            bail!(
                "data error: {name} samples have shape {:?}, model expects {want:?}",
                d.sample_shape()
            );
        }
    }
    Ok((train, test))
}

fn load_teacher(src: &TeacherSource, train: &Dataset, classes: usize) -> Result<Option<Teacher>> {
    Ok(match src {
        TeacherSource::None => None,
        TeacherSource::Checkpoint { path } => {
            let m = load_checkpoint(path).with_context(|| format!("teacher.path {}", path.display()))?;
            ensure!(
                m.config().num_classes == classes,
                "data error: teacher predicts {} classes, student {classes}",
                m.config().num_classes
            );
            Some(Teacher::Live(Box::new(m)))
        }
        TeacherSource::LogitsCache { path } => {
            let c = LogitsCache::load(path).with_context(|| format!("teacher.path {}", path.display()))?;
            c.check_dataset(train)?;
            Some(Teacher::Cached(c))
        }
    })
}

/// First `n` samples of `data` as one batch.
fn head_batch(data: &Dataset, n: usize) -> Result<Tensor> {
    ensure!(!data.is_empty(), "data error: empty split");
    let idx: Vec<usize> = (0..n.min(data.len())).collect();
    Ok(data.batch(&idx)?.x)
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ce_class: f64,
    pub ce_distill: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub model: String,
    pub parameters: usize,
    pub seed: u64,
    pub epochs: usize,
    pub final_checkpoint: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub cost: CostReport,
    pub rep_cap: RepCapReport,
}

/// Trains from the config, writing under `out_dir`:
/// `effective_config.toml`, `checkpoints/epoch_NNNN.ckpt` (0 is the
/// initial state), `metrics.jsonl` and `summary.json`.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    fs::write(out.join("effective_config.toml"), cfg.to_toml()?)?;

    let (train, test) = load_data(cfg, &cfg.model)?;
    let teacher = load_teacher(&cfg.teacher, &train, cfg.model.num_classes)?;
    let mut master = Rng::new(cfg.seed);
    let model_seed = master.next_u64();
    let mut order_rng = master.fork();
    let mut model = Model::new(&cfg.model, model_seed)?;
    save_checkpoint(&model, &ckpt_dir.join(checkpoint_name(0)))?;

    let mut opt = AdamW::new(cfg.optimizer.clone())?;
    let steps = (train.len().div_ceil(cfg.batch_size) * cfg.epochs) as u64;
    let schedule = CosineSchedule::new(&cfg.optimizer, steps);
    let mut log_file = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
    for e in 0..cfg.epochs {
        let t0 = Instant::now();
        let m = train_epoch(
            &mut model,
            &train,
            teacher.as_ref(),
            &mut opt,
            &schedule,
            &mut order_rng,
            cfg.batch_size,
            e,
        )?;
        let rec = EpochRecord {
            epoch: e + 1,
            loss: m.loss,
            ce_class: m.ce_class,
            ce_distill: m.ce_distill,
            train_accuracy: m.train_accuracy,
            test_accuracy: evaluate(&model, &test, cfg.eval_batch_size)?,
            grad_norm: m.grad_norm,
            lr: m.lr,
        };
        writeln!(log_file, "{}", serde_json::to_string(&rec)?)?;
        save_checkpoint(&model, &ckpt_dir.join(checkpoint_name(e + 1)))?;
        info!(
            "epoch {}/{}: loss {:.4} train {:.3} test {:.3} ({:.1}s)",
            e + 1,
            cfg.epochs,
            rec.loss,
            rec.train_accuracy,
            rec.test_accuracy,
            t0.elapsed().as_secs_f64()
        );
    }
    log_file.flush()?;

    let probe = head_batch(&test, cfg.metrics.probe_batch)?;
    let summary = TrainSummary {
        model: cfg.model.label(),
        parameters: cfg.model.param_breakdown().total(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        final_checkpoint: format!("checkpoints/{}", checkpoint_name(cfg.epochs)),
        train_accuracy: evaluate(&model, &train, cfg.eval_batch_size)?,
        test_accuracy: evaluate(&model, &test, cfg.eval_batch_size)?,
        cost: cost_report(&model, &probe)?,
        rep_cap: rep_cap(&model, &probe, rep_opts(cfg))?,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn rep_opts(cfg: &RunConfig) -> RepCapOptions {
    RepCapOptions {
        decimals: cfg.metrics.decimals,
        bins: cfg.metrics.bins,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            _ => Err(format!("unknown split {s:?} (train, test)")),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRecord {
    pub model: String,
    pub split: &'static str,
    pub samples: usize,
    pub accuracy: f64,
    pub cost: CostReport,
}

/// Top-1 accuracy and cost of a checkpoint on one split of the configured
/// dataset; written to `out_dir/eval.json`.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<EvalRecord> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let (train, test) = load_data(cfg, model.config())?;
    let (data, name) = match split {
        Split::Train => (&train, "train"),
        Split::Test => (&test, "test"),
    };
    let probe = head_batch(data, cfg.metrics.probe_batch)?;
    let rec = EvalRecord {
        model: model.config().label(),
        split: name,
        samples: data.len(),
        accuracy: evaluate(&model, data, cfg.eval_batch_size)?,
        cost: cost_report(&model, &probe)?,
    };
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("eval.json"), &rec)?;
    Ok(rec)
}

#[derive(Clone, Debug, Serialize)]
pub struct InspectRecord {
    pub block: usize,
    pub value_set_size: f64,
    pub entropy_bits: f64,
    pub elements: usize,
}

/// Per-block representation statistics on the first `batch` held-out
/// samples; written to `out_dir/inspect.jsonl`.
pub fn inspect(cfg: &RunConfig, checkpoint: &Path, batch: usize) -> Result<Vec<InspectRecord>> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let (_, test) = load_data(cfg, model.config())?;
    let x = head_batch(&test, batch.max(1))?;
    let r = rep_cap(&model, &x, rep_opts(cfg))?;
    let recs: Vec<InspectRecord> = r
        .value_set_sizes
        .iter()
        .zip(&r.entropy_bits)
        .enumerate()
        .map(|(i, (&v, &h))| InspectRecord {
            block: i,
            value_set_size: v,
            entropy_bits: h,
            elements: r.elements,
        })
        .collect();
    fs::create_dir_all(&cfg.out_dir)?;
    let mut w = BufWriter::new(File::create(cfg.out_dir.join("inspect.jsonl"))?);
    for rec in &recs {
        writeln!(w, "{}", serde_json::to_string(rec)?)?;
    }
    w.flush()?;
    Ok(recs)
}

/// Evaluates a teacher checkpoint on the training split and stores its
/// logits at `out_dir/teacher_logits.blgc`.
pub fn pack_teacher_logits(cfg: &RunConfig, checkpoint: &Path) -> Result<PathBuf> {
    let model = load_checkpoint(checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let (train, _) = load_data(cfg, model.config())?;
    let cache = LogitsCache::build(&model, &train, cfg.eval_batch_size)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("teacher_logits.blgc");
    cache.save(&path)?;
    Ok(path)
}

/// Weight storage of a float `rows x cols` matrix over its packed form.
pub fn weight_memory_ratio(rows: usize, cols: usize) -> f64 {
    let packed = PackedBits::zeros(rows, cols).storage_bytes();
    (rows * cols * 4) as f64 / packed as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub rows: usize,
    pub cols: usize,
    pub batch: usize,
    pub packed_us: f64,
    pub reference_us: f64,
    pub speedup: f64,
    pub packed_weight_bytes: usize,
    pub float_weight_bytes: usize,
    pub memory_ratio: f64,
    pub outputs_equal: bool,
}

/// Packed popcount projection against the dense float path on `batch`
/// random spike rows, for each `(rows, cols)` weight shape.
pub fn bench(sizes: &[(usize, usize)], batch: usize, iters: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rng = Rng::new(seed);
    let mut rows_out = Vec::with_capacity(sizes.len());
    for &(rows, cols) in sizes {
        ensure!(rows > 0 && cols > 0 && batch > 0, "bench sizes must be positive, got {rows}x{cols}");
        let layer = BinaryLinear::new(
            "bench",
            cols,
            rows,
            WeightMode::Binary,
            StandardizeMode::PerTensor,
            1.0,
            &mut rng,
        );
        let x = rng.spike_tensor(&[batch, cols], 0.3);
        let packed = layer.project(&x)?;
        let reference = layer.project_reference(&x)?;
        let time = |f: &dyn Fn() -> Result<Tensor>| -> Result<f64> {
            let t0 = Instant::now();
            for _ in 0..iters.max(1) {
                std::hint::black_box(f()?);
            }
            Ok(t0.elapsed().as_secs_f64() * 1e6 / iters.max(1) as f64)
        };
        let packed_us = time(&|| Ok(layer.project(&x)?))?;
        let reference_us = time(&|| Ok(layer.project_reference(&x)?))?;
        let pb = layer.binary_weights()?.storage_bytes();
        rows_out.push(BenchRow {
            rows,
            cols,
            batch,
            packed_us,
            reference_us,
            speedup: reference_us / packed_us,
            packed_weight_bytes: pb,
            float_weight_bytes: rows * cols * 4,
            memory_ratio: weight_memory_ratio(rows, cols),
            outputs_equal: packed == reference,
        });
    }
    Ok(rows_out)
}

/// Parses `512x512,1x65` into `(rows, cols)` pairs.
pub fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|p| {
            let (r, c) = p
                .trim()
                .split_once(['x', 'X'])
                .with_context(|| format!("size {p:?} is not ROWSxCOLS"))?;
            Ok((r.parse()?, c.parse()?))
        })
        .collect()
}
