//! Run configuration: a TOML file with nested sections, every field defaulted.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bestformer_core::data::DatasetSpec;
use bestformer_core::learn::OptimConfig;
use bestformer_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

/// Where distillation targets come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSource {
    #[default]
    None,
    /// A model checkpoint evaluated live on every batch.
    Checkpoint { path: PathBuf },
    /// Logits precomputed with `pack-teacher-logits`.
    LogitsCache { path: PathBuf },
}

impl TeacherSource {
    pub fn path(&self) -> Option<&Path> {
        match self {
            TeacherSource::None => None,
            TeacherSource::Checkpoint { path } | TeacherSource::LogitsCache { path } => Some(path),
        }
    }
}

/// Settings of the representation and cost probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Round to this many decimals before counting distinct values.
    #[serde(default)]
    pub decimals: Option<u32>,
    #[serde(default = "d_bins")]
    pub bins: usize,
    /// Held-out samples fed to the probes.
    #[serde(default = "d_probe_batch")]
    pub probe_batch: usize,
}

fn d_bins() -> usize {
    256
}
fn d_probe_batch() -> usize {
    64
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            decimals: None,
            bins: d_bins(),
            probe_batch: d_probe_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and data order.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
    #[serde(default = "d_model")]
    pub model: ModelConfig,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub teacher: TeacherSource,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

fn d_epochs() -> usize {
    50
}
fn d_batch() -> usize {
    32
}
fn d_eval_batch() -> usize {
    100
}
fn d_out() -> PathBuf {
    PathBuf::from("runs/default")
}
/// Two blocks, 32 channels, two timesteps over 64-dim vectors split into 4 tokens.
fn d_model() -> ModelConfig {
    ModelConfig::vector(2, 32, 2, 10, 4, 16)
}
fn d_optimizer() -> OptimConfig {
    OptimConfig {
        lr: 1e-2,
        ..OptimConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: d_epochs(),
            batch_size: d_batch(),
            eval_batch_size: d_eval_batch(),
            out_dir: d_out(),
            model: d_model(),
            optimizer: d_optimizer(),
            dataset: DatasetSpec::default(),
            teacher: TeacherSource::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks every field, reporting all problems at once as `field: reason`.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(e) = self.model.validate() {
            errs.push(format!("model: {e}"));
        }
        if let Err(e) = self.optimizer.validate() {
            errs.push(e.to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size: must be positive".into());
        }
        if self.eval_batch_size == 0 {
            errs.push("eval_batch_size: must be positive".into());
        }
        if self.metrics.bins < 2 {
            errs.push("metrics.bins: must be at least 2".into());
        }
        if self.metrics.probe_batch == 0 {
            errs.push("metrics.probe_batch: must be positive".into());
        }
        if let Some(p) = self.dataset.path() {
            if !p.is_file() {
                errs.push(format!("dataset.path: file not found: {}", p.display()));
            }
        }
        if let DatasetSpec::SyntheticGaussianClusters(s) = &self.dataset {
            if s.num_classes != self.model.num_classes {
                errs.push(format!(
                    "dataset.num_classes: {} differs from model.num_classes {}",
                    s.num_classes, self.model.num_classes
                ));
            }
            let want: usize = self.model.stem.sample_shape().iter().product();
            if s.dims != want {
                errs.push(format!("dataset.dims: {} but the model stem expects {want}", s.dims));
            }
        }
        if let DatasetSpec::LabeledCsv { num_classes, .. } = &self.dataset {
            if *num_classes != self.model.num_classes {
                errs.push(format!(
                    "dataset.num_classes: {num_classes} differs from model.num_classes {}",
                    self.model.num_classes
                ));
            }
        }
        if let Some(p) = self.teacher.path() {
            if !p.is_file() {
                errs.push(format!("teacher.path: file not found: {}", p.display()));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration:\n  {}", errs.join("\n  "))
        }
    }
}
