//! Forward-pass context and optional instrumentation.

use crate::numeric::Tensor;

/// Per-layer event counts gathered during a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerStat {
    pub name: String,
    /// Number of input spikes (ones) seen by the layer.
    pub input_spikes: u64,
    /// Accumulations triggered by one input spike.
    pub fan_out: u64,
    /// Exact accumulate count: spikes times fan-out, or the measured count
    /// for layers whose fan-out varies per position (convolutions at borders).
    pub synaptic_ops: u64,
}

/// Instrumentation collected when a [`Ctx`] carries a probe.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub layers: Vec<LayerStat>,
    /// Integer accumulations in binarized-attention times V products.
    pub attention_accumulations: u64,
    /// Real-valued inputs to spiking neurons, tagged with the block they belong to
    /// (`None` for the stem).
    pub pre_spike_inputs: Vec<(Option<usize>, String, Tensor)>,
    /// Encoder state after each block: one tensor per stream.
    pub block_outputs: Vec<Vec<Tensor>>,
    pub current_block: Option<usize>,
    /// Number of samples in the batch the counts refer to.
    pub batch: usize,
    /// Keep copies of neuron inputs (memory heavy).
    pub keep_tensors: bool,
}

impl Probe {
    pub fn counting() -> Self {
        Self::default()
    }

    pub fn with_tensors() -> Self {
        Self {
            keep_tensors: true,
            ..Self::default()
        }
    }

    /// Synaptic operations summed over layers and attention, per sample.
    pub fn sops_per_sample(&self) -> f64 {
        let total: u64 =
            self.layers.iter().map(|l| l.synaptic_ops).sum::<u64>() + self.attention_accumulations;
        total as f64 / self.batch.max(1) as f64
    }
}

/// Mode flags threaded through every forward call.
#[derive(Debug, Default)]
pub struct Ctx {
    pub train: bool,
    pub probe: Option<Probe>,
}

impl Ctx {
    pub fn train() -> Self {
        Self {
            train: true,
            probe: None,
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }

    pub fn probed(probe: Probe) -> Self {
        Self {
            train: false,
            probe: Some(probe),
        }
    }

    pub(crate) fn record_layer(&mut self, name: &str, input_spikes: u64, fan_out: u64, ops: u64) {
        if let Some(p) = self.probe.as_mut() {
            p.layers.push(LayerStat {
                name: name.to_string(),
                input_spikes,
                fan_out,
                synaptic_ops: ops,
            });
        }
    }

    pub(crate) fn record_pre_spike(&mut self, name: &str, x: &Tensor) {
        if let Some(p) = self.probe.as_mut() {
            if p.keep_tensors {
                let block = p.current_block;
                p.pre_spike_inputs.push((block, name.to_string(), x.clone()));
            }
        }
    }
}
