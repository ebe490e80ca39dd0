//! Representation-capability and cost instrumentation.

use std::collections::HashSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamBreakdown};
use crate::numeric::Tensor;
use crate::probe::{Ctx, Probe};

/// Number of distinct values. With `decimals`, values are first rounded to
/// that many decimal places; otherwise floats are compared exactly
/// (`-0.0 == 0.0`).
pub fn value_set_size(x: &Tensor, decimals: Option<u32>) -> usize {
    let key = |v: f32| -> u64 {
        match decimals {
            None => {
                let v = if v == 0.0 { 0.0 } else { v };
                v.to_bits() as u64
            }
            Some(d) => {
                let r = ((v as f64) * 10f64.powi(d as i32)).round();
                let r = if r == 0.0 { 0.0 } else { r };
                r.to_bits()
            }
        }
    };
    x.data().iter().map(|&v| key(v)).collect::<HashSet<_>>().len()
}

/// Shannon entropy in bits of a `bins`-cell histogram over `[min, max]`.
/// Constant inputs have zero entropy.
pub fn entropy_proxy(x: &Tensor, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Config(format!("entropy_proxy needs at least 2 bins, got {bins}")));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    x.check_finite("entropy_proxy")?;
    let (lo, hi) = x
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
    if hi == lo {
        return Ok(0.0);
    }
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &v in x.data() {
        let i = (((v as f64 - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = x.len() as f64;
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum())
}

/// Per-block representation statistics of the encoder output streams.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RepCapReport {
    /// Mean per-sample value-set size of each block's output.
    pub value_set_sizes: Vec<f64>,
    /// Mean per-sample entropy proxy (bits) of each block's output.
    pub entropy_bits: Vec<f64>,
    /// Elements in one sample's feature map.
    pub elements: usize,
}

/// Options for [`rep_cap`].
#[derive(Clone, Copy, Debug)]
pub struct RepCapOptions {
    pub decimals: Option<u32>,
    pub bins: usize,
}

impl Default for RepCapOptions {
    fn default() -> Self {
        Self {
            decimals: None,
            bins: 256,
        }
    }
}

/// The `[T, N, D]` slice of sample `b` from a `[T, B, N, D]` stream.
pub fn sample_slice(stream: &Tensor, b: usize) -> Result<Tensor> {
    let &[t, bs, n, d] = stream.shape() else {
        return Err(Error::dim("sample_slice", stream.shape(), &[]));
    };
    if b >= bs {
        return Err(Error::Index { index: b, bound: bs });
    }
    let per = n * d;
    let mut data = Vec::with_capacity(t * per);
    for ti in 0..t {
        let off = (ti * bs + b) * per;
        data.extend_from_slice(&stream.data()[off..off + per]);
    }
    Tensor::new(&[t, n, d], data)
}

/// Value-set size and entropy of each block's output on `x`, measured on the
/// real-valued stream entering the next block's neurons. Reversible blocks
/// are measured on the classification stream.
pub fn rep_cap(model: &Model, x: &Tensor, opts: RepCapOptions) -> Result<RepCapReport> {
    let mut ctx = Ctx::probed(Probe::with_tensors());
    model.forward(x, &mut ctx)?;
    let probe = ctx.probe.expect("probe attached");
    let tap = match model.config().classify_on {
        crate::model::StreamTap::X0 => 0,
        crate::model::StreamTap::X1 => 1,
    };
    let mut report = RepCapReport::default();
    let b = x.shape()[0];
    for streams in &probe.block_outputs {
        let s = &streams[tap.min(streams.len() - 1)];
        let (mut vs, mut ent) = (0.0, 0.0);
        for i in 0..b {
            let slice = sample_slice(s, i)?;
            report.elements = slice.len();
            vs += value_set_size(&slice, opts.decimals) as f64;
            ent += entropy_proxy(&slice, opts.bins)?;
        }
        report.value_set_sizes.push(vs / b as f64);
        report.entropy_bits.push(ent / b as f64);
    }
    Ok(report)
}

/// Synaptic operations per sample on a batch, in units of 10⁹.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SopsReport {
    pub per_sample: f64,
    pub sops_g: f64,
    /// `(layer, synaptic ops per sample)`.
    pub layers: Vec<(String, f64)>,
    pub attention_per_sample: f64,
}

/// Spike count times fan-out summed over binary layers, plus the
/// accumulations of the attention products, averaged per sample.
pub fn count_sops(model: &Model, x: &Tensor) -> Result<SopsReport> {
    let mut ctx = Ctx::probed(Probe::counting());
    model.forward(x, &mut ctx)?;
    let p = ctx.probe.expect("probe attached");
    let b = p.batch.max(1) as f64;
    let per_sample = p.sops_per_sample();
    Ok(SopsReport {
        per_sample,
        sops_g: per_sample / 1e9,
        layers: p.layers.iter().map(|l| (l.name.clone(), l.synaptic_ops as f64 / b)).collect(),
        attention_per_sample: p.attention_accumulations as f64 / b,
    })
}

/// Bit-width weighting of synaptic operations calibrated on published
/// resource figures: 1 bit -> 1, 2 bits -> 2, 32 bits -> 16.
pub fn ns_ace_factor(weight_bits: u32) -> Result<f64> {
    match weight_bits {
        1 => Ok(1.0),
        2 => Ok(2.0),
        32 => Ok(16.0),
        b => Err(Error::Config(format!(
            "no NS-ACE calibration for {b}-bit weights (calibrated: 1, 2, 32)"
        ))),
    }
}

pub fn ns_ace(sops_g: f64, weight_bits: u32) -> Result<f64> {
    Ok(sops_g * ns_ace_factor(weight_bits)?)
}

/// Storage of a deployed model in MB (10⁶ bytes): projection weights at
/// their bit width plus 4 bytes per full-precision parameter. The
/// training-only distillation head is excluded.
pub fn model_size_mb(breakdown: &ParamBreakdown) -> f64 {
    let weight_bytes = breakdown.projection_weights as f64 * breakdown.projection_bits as f64 / 8.0;
    let aux_bytes = 4.0 * breakdown.inference_full_precision() as f64;
    (weight_bytes + aux_bytes) / 1e6
}

pub fn config_size_mb(cfg: &ModelConfig) -> f64 {
    model_size_mb(&cfg.param_breakdown())
}

/// Cost summary of a model on a batch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub sops_g: f64,
    pub ns_ace_g: f64,
    pub model_size_mb: f64,
    pub weight_bits: u32,
}

pub fn cost_report(model: &Model, x: &Tensor) -> Result<CostReport> {
    let bits = model.config().weights.bits();
    let sops = count_sops(model, x)?;
    Ok(CostReport {
        sops_g: sops.sops_g,
        ns_ace_g: ns_ace(sops.sops_g, bits)?,
        model_size_mb: config_size_mb(model.config()),
        weight_bits: bits,
    })
}
