use super::config::ModelConfig;
use super::layers::{SpikeCache, SpikeLayer};
use crate::binary::{BinaryLinear, LinearCache};
use crate::error::Result;
use crate::neuron::Reset;
use crate::numeric::{Rng, Tensor};
use crate::param::{join, Module, Visitor};
use crate::probe::Ctx;

/// Binary MLP: `LIF -> fc1 -> BN -> LIF -> fc2 -> BN` with hidden expansion.
#[derive(Clone, Debug)]
pub struct Bmlp {
    lif1: SpikeLayer,
    fc1: BinaryLinear,
    lif2: SpikeLayer,
    fc2: BinaryLinear,
}

#[derive(Debug)]
pub struct BmlpCache {
    s1: SpikeCache,
    l1: LinearCache,
    s2: SpikeCache,
    l2: LinearCache,
}

impl Bmlp {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let hr = cfg.neuron(Reset::Hard);
        let (d, hd) = (cfg.embed_dim, cfg.hidden_dim());
        let clip = cfg.ste_clip as f32;
        Self {
            lif1: SpikeLayer::new(&join(name, "lif1"), hr),
            fc1: BinaryLinear::new(&join(name, "fc1"), d, hd, cfg.weights, cfg.standardize, clip, rng),
            lif2: SpikeLayer::new(&join(name, "lif2"), hr),
            fc2: BinaryLinear::new(&join(name, "fc2"), hd, d, cfg.weights, cfg.standardize, clip, rng),
        }
    }

    pub fn projections(&self) -> [&BinaryLinear; 2] {
        [&self.fc1, &self.fc2]
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, BmlpCache)> {
        let (a, s1) = self.lif1.forward(x, ctx)?;
        let (h, l1) = self.fc1.forward(&a, ctx)?;
        let (b, s2) = self.lif2.forward(&h, ctx)?;
        let (y, l2) = self.fc2.forward(&b, ctx)?;
        Ok((y, BmlpCache { s1, l1, s2, l2 }))
    }

    pub fn backward(&mut self, c: BmlpCache, grad: &Tensor) -> Result<Tensor> {
        let g = self.fc2.backward(c.l2, grad)?;
        let g = self.lif2.backward(c.s2, &g)?;
        let g = self.fc1.backward(c.l1, &g)?;
        self.lif1.backward(c.s1, &g)
    }
}

impl Module for Bmlp {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.fc1.visit(&join(prefix, "fc1"), v);
        self.fc2.visit(&join(prefix, "fc2"), v);
    }
}
