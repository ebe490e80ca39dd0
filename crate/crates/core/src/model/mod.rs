//! The network: stem, encoder stack and dual heads.

mod attention;
mod checkpoint;
mod config;
mod encoder;
mod layers;
mod mlp;
mod stem;

pub use attention::{Bssa, BssaCache};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AttentionMode, ConvStage, EncoderKind, ModelConfig, ParamBreakdown, StemSpec, StreamTap};
pub use encoder::{to_stream, BlockCache, EncoderBlock, ReversibleState, STREAM_GRID};
pub use layers::{BatchNormLayer, Head, HeadCache, SpikeCache, SpikeLayer};
pub use mlp::{Bmlp, BmlpCache};
pub use stem::{col2im3, im2col3, Stem, StemCache};

use crate::binary::BinaryLinear;
use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};
use crate::param::{join, Module, Visitor};
use crate::probe::Ctx;

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub stem: Stem,
    pub blocks: Vec<EncoderBlock>,
    pub head: Head,
    pub dist_head: Head,
}

/// Logits of both heads, `[B, C]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub logits: Tensor,
    pub dist_logits: Tensor,
}

#[derive(Debug)]
pub struct ModelCache {
    stem: StemCache,
    blocks: Vec<BlockCache>,
    head: HeadCache,
    dist_head: HeadCache,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let stem = Stem::new(cfg, &mut rng);
        let blocks = (0..cfg.depth).map(|i| EncoderBlock::new(i, cfg, &mut rng)).collect();
        let head = Head::new(cfg.embed_dim, cfg.num_classes, &mut rng);
        let dist_head = Head::new(cfg.embed_dim, cfg.num_classes, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            blocks,
            head,
            dist_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Stem output, used to seed the encoder.
    pub fn embed(&self, x: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        Ok(self.stem.forward(x, ctx)?.0)
    }

    /// Runs all encoder blocks from `s`.
    pub fn encode(&self, s: ReversibleState, ctx: &mut Ctx) -> Result<ReversibleState> {
        let mut s = s;
        for (i, b) in self.blocks.iter().enumerate() {
            s = self.run_block(i, b, &s, ctx)?.0;
        }
        Ok(s)
    }

    /// Undoes [`Model::encode`] block by block (reversible encoders only).
    pub fn decode(&self, s: ReversibleState, ctx: &mut Ctx) -> Result<ReversibleState> {
        let mut s = s;
        for b in self.blocks.iter().rev() {
            s = b.inverse(&s, ctx)?;
        }
        Ok(s)
    }

    fn run_block(
        &self,
        i: usize,
        b: &EncoderBlock,
        s: &ReversibleState,
        ctx: &mut Ctx,
    ) -> Result<(ReversibleState, BlockCache)> {
        if let Some(p) = ctx.probe.as_mut() {
            p.current_block = Some(i);
        }
        let (y, c) = b.forward(s, ctx)?;
        if let Some(p) = ctx.probe.as_mut() {
            p.current_block = None;
            if p.keep_tensors {
                let streams = match b.kind() {
                    EncoderKind::Reversible => vec![y.x0.cast(), y.x1.cast()],
                    EncoderKind::Residual => vec![y.x0.cast()],
                };
                p.block_outputs.push(streams);
            }
        }
        Ok((y, c))
    }

    /// `(classification, distillation)` streams in `f32`.
    fn taps(&self, s: &ReversibleState) -> (Tensor, Tensor) {
        match self.cfg.classify_on {
            StreamTap::X0 => (s.x0.cast(), s.x1.cast()),
            StreamTap::X1 => (s.x1.cast(), s.x0.cast()),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(ModelOutput, ModelCache)> {
        if let Some(p) = ctx.probe.as_mut() {
            p.batch += x.shape()[0];
        }
        let (e, stem) = self.stem.forward(x, ctx)?;
        let mut s = ReversibleState::seeded(e);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, c) = self.run_block(i, b, &s, ctx)?;
            s = y;
            blocks.push(c);
        }
        let (cls, dist) = self.taps(&s);
        let (logits, head) = self.head.forward(&cls)?;
        let (dist_logits, dist_head) = self.dist_head.forward(&dist)?;
        logits.check_finite("logits")?;
        Ok((
            ModelOutput { logits, dist_logits },
            ModelCache {
                stem,
                blocks,
                head,
                dist_head,
            },
        ))
    }

    /// Inference logits of the classification head.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, &mut Ctx::eval())?.0.logits)
    }

    /// Accumulates gradients of a loss whose derivatives on the two logit
    /// tensors are `g_logits` and `g_dist`.
    pub fn backward(&mut self, c: ModelCache, g_logits: &Tensor, g_dist: &Tensor) -> Result<()> {
        let g_cls = self.head.backward(c.head, g_logits)?;
        let g_d = self.dist_head.backward(c.dist_head, g_dist)?;
        let mut g = match self.cfg.classify_on {
            StreamTap::X0 => ReversibleState { x0: g_cls, x1: g_d },
            StreamTap::X1 => ReversibleState { x0: g_d, x1: g_cls },
        };
        for (b, bc) in self.blocks.iter_mut().zip(c.blocks).rev() {
            g = b.backward(bc, g)?;
        }
        let g_e = g.x0.add(&g.x1)?;
        self.stem.backward(c.stem, &g_e)
    }

    /// Every binary projection in forward order.
    pub fn projections(&self) -> Vec<&BinaryLinear> {
        let mut v = self.stem.projections();
        for b in &self.blocks {
            v.extend(b.attn.projections());
            v.extend(b.mlp.projections());
        }
        v
    }

    /// Clamps every λ to `floor`.
    pub fn project_lambda(&mut self, floor: f32) {
        for b in &mut self.blocks {
            b.attn.lam.project(floor);
        }
    }

    /// Checks a batch against the configured input shape.
    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.cfg.stem.sample_shape();
        if x.shape().len() != want.len() + 1 || x.shape()[1..] != want[..] {
            let mut full = vec![x.shape().first().copied().unwrap_or(0)];
            full.extend(want);
            return Err(Error::dim("model input", x.shape(), &full));
        }
        Ok(())
    }
}

impl Module for Model {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.stem.visit(&join(prefix, "stem"), v);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), v);
        }
        self.head.visit(&join(prefix, "head"), v);
        self.dist_head.visit(&join(prefix, "dist_head"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;
    use crate::probe::Probe;

    #[test]
    fn param_count_matches_formula() {
        let mut cfgs = vec![
            ModelConfig::vector(2, 32, 2, 10, 4, 16),
            ModelConfig::bestformer_cifar(1, 64, 2, 10),
            ModelConfig::vector(3, 24, 3, 5, 2, 8).full_precision_counterpart(),
        ];
        cfgs[0].hidden_ratio = 2.5;
        for cfg in cfgs {
            let mut m = Model::new(&cfg, 0).unwrap();
            assert_eq!(m.num_params(), cfg.param_breakdown().total(), "{}", cfg.label());
            let bits: usize = m.projections().iter().map(|p| p.weight_count()).sum();
            assert_eq!(bits, cfg.param_breakdown().projection_weights);
        }
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let cfg = ModelConfig::vector(1, 16, 2, 4, 2, 8);
        let mut m = Model::new(&cfg, 1).unwrap();
        m.head = Head::zeroed(16, 4);
        m.dist_head = Head::zeroed(16, 4);
        let x = Rng::new(0).normal_tensor(&[3, 16], 1.0);
        let (out, _) = m.forward(&x, &mut Ctx::eval()).unwrap();
        assert_eq!(out.logits.max_abs(), 0.0);
        assert_eq!(out.dist_logits.max_abs(), 0.0);
    }

    #[test]
    fn stem_seeds_both_streams_and_decode_recovers_it() {
        let cfg = ModelConfig::vector(3, 16, 2, 4, 2, 8);
        let m = Model::new(&cfg, 2).unwrap();
        let x = Rng::new(0).normal_tensor(&[2, 16], 1.0);
        let mut ctx = Ctx::eval();
        let e = m.embed(&x, &mut ctx).unwrap();
        let s = ReversibleState::seeded(e.clone());
        assert_eq!(s.x0, s.x1);
        assert!(s.x0.cast::<f32>().max_abs_diff(&e).unwrap() <= 0.5 / STREAM_GRID as f32);
        let y = m.encode(s.clone(), &mut ctx).unwrap();
        assert_eq!(m.decode(y, &mut ctx).unwrap(), s);
    }

    #[test]
    fn probe_collects_block_outputs() {
        let cfg = ModelConfig::vector(2, 16, 2, 4, 2, 8);
        let m = Model::new(&cfg, 3).unwrap();
        let x = Rng::new(0).normal_tensor(&[2, 16], 1.0);
        let mut ctx = Ctx::probed(Probe::with_tensors());
        m.forward(&x, &mut ctx).unwrap();
        let p = ctx.probe.unwrap();
        assert_eq!(p.block_outputs.len(), 2);
        assert_eq!(p.block_outputs[0].len(), 2);
        assert_eq!(p.batch, 2);
        assert!(p.sops_per_sample() > 0.0);
    }

    #[test]
    fn wiring_swap_changes_which_stream_classifies() {
        let mut cfg = ModelConfig::vector(1, 16, 2, 4, 2, 8);
        let a = Model::new(&cfg, 5).unwrap();
        cfg.classify_on = StreamTap::X1;
        let b = Model::new(&cfg, 5).unwrap();
        let x = Rng::new(1).normal_tensor(&[2, 16], 1.0);
        let (oa, _) = a.forward(&x, &mut Ctx::eval()).unwrap();
        let (ob, _) = b.forward(&x, &mut Ctx::eval()).unwrap();
        // same parameters, heads read opposite streams
        let s = a.encode(ReversibleState::seeded(a.embed(&x, &mut Ctx::eval()).unwrap()), &mut Ctx::eval()).unwrap();
        assert_eq!(oa.logits, a.head.forward(&s.x0.cast()).unwrap().0);
        assert_eq!(ob.logits, b.head.forward(&s.x1.cast()).unwrap().0);
    }

    #[test]
    fn backward_populates_gradients() {
        let cfg = ModelConfig::vector(2, 16, 2, 4, 2, 8);
        let mut m = Model::new(&cfg, 4).unwrap();
        let x = Rng::new(0).normal_tensor(&[4, 16], 2.0);
        let (out, cache) = m.forward(&x, &mut Ctx::train()).unwrap();
        let g = Rng::new(1).normal_tensor(out.logits.shape(), 1.0);
        m.backward(cache, &g, &g).unwrap();
        struct Norms(Vec<(String, f32)>);
        impl Visitor for Norms {
            fn param(&mut self, n: &str, _: &[usize], _: &mut [f32], g: &mut [f32], _: ParamKind) {
                self.0.push((n.into(), g.iter().map(|v| v.abs()).sum()));
            }
            fn buffer(&mut self, _: &str, _: &mut [f32]) {}
        }
        let mut n = Norms(vec![]);
        m.visit("", &mut n);
        for (name, norm) in &n.0 {
            assert!(norm.is_finite(), "{name}");
        }
        assert!(n.0.iter().find(|(k, _)| k == "head.weight").unwrap().1 > 0.0);
        assert!(n.0.iter().find(|(k, _)| k == "dist_head.weight").unwrap().1 > 0.0);
    }
}
