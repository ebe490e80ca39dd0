//! Encoder blocks: the two-stream reversible coupling and the residual
//! baseline.

use super::attention::{Bssa, BssaCache};
use super::config::{EncoderKind, ModelConfig};
use super::mlp::{Bmlp, BmlpCache};
use crate::error::{Error, Result};
use crate::numeric::{Rng, Scalar, Tensor};
use crate::param::{join, Module, Visitor};
use crate::probe::Ctx;

/// Scale of the grid that sub-block outputs and the stem embedding are
/// rounded onto before entering the streams.
///
/// Streams are held in `f64`; with every addend on a dyadic grid each coupling
/// sum, halving and difference is exact, so [`EncoderBlock::inverse`] returns
/// the block input bit for bit and re-simulated spikes match the forward pass.
/// Exactness holds while `|stream| < 2^(37 - 2 * depth)`.
pub const STREAM_GRID: f64 = 65536.0;

/// Rounds a sub-block output onto the stream grid.
pub fn to_stream(x: &Tensor) -> Tensor<f64> {
    x.cast::<f64>().map(|v| (v * STREAM_GRID).round() / STREAM_GRID)
}

/// The pair of streams carried between blocks, each `[T, B, N, D]`.
///
/// Residual blocks carry a single stream; it is mirrored into both fields.
/// Gradients use the same layout in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReversibleState<F: Scalar = f64> {
    pub x0: Tensor<F>,
    pub x1: Tensor<F>,
}

impl<F: Scalar> ReversibleState<F> {
    pub fn new(x0: Tensor<F>, x1: Tensor<F>) -> Result<Self> {
        if x0.shape() != x1.shape() {
            return Err(Error::dim("ReversibleState", x0.shape(), x1.shape()));
        }
        x0.check_finite("x0")?;
        x1.check_finite("x1")?;
        Ok(Self { x0, x1 })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<F> {
        Ok(self.x0.max_abs_diff(&other.x0)?.max(self.x1.max_abs_diff(&other.x1)?))
    }
}

impl ReversibleState {
    /// Both streams seeded with the same embedding, rounded onto the grid.
    pub fn seeded(x: Tensor) -> Self {
        let x = to_stream(&x);
        Self { x0: x.clone(), x1: x }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    kind: EncoderKind,
    pub attn: Bssa,
    pub mlp: Bmlp,
}

#[derive(Debug)]
pub struct BlockCache {
    attn: BssaCache,
    mlp: BmlpCache,
}

impl EncoderBlock {
    pub fn new(index: usize, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let name = format!("blocks.{index}");
        Self {
            kind: cfg.encoder,
            attn: Bssa::new(&join(&name, "attn"), cfg, rng),
            mlp: Bmlp::new(&join(&name, "mlp"), cfg, rng),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn forward(&self, s: &ReversibleState, ctx: &mut Ctx) -> Result<(ReversibleState, BlockCache)> {
        match self.kind {
            EncoderKind::Reversible => {
                let (f, attn) = self.attn.forward(&s.x1.cast(), ctx)?;
                let y0 = to_stream(&f).add(&s.x0.add(&s.x1)?.scale(0.5))?;
                let (g, mlp) = self.mlp.forward(&y0.cast(), ctx)?;
                let y1 = to_stream(&g).add(&s.x1.add(&y0)?.scale(0.5))?;
                Ok((ReversibleState { x0: y0, x1: y1 }, BlockCache { attn, mlp }))
            }
            EncoderKind::Residual => {
                let (f, attn) = self.attn.forward(&s.x0.cast(), ctx)?;
                let y = s.x0.add(&to_stream(&f))?;
                let (g, mlp) = self.mlp.forward(&y.cast(), ctx)?;
                let y = y.add(&to_stream(&g))?;
                Ok((ReversibleState { x0: y.clone(), x1: y }, BlockCache { attn, mlp }))
            }
        }
    }

    /// Reconstructs the block input from its output by re-simulating the
    /// sub-blocks from a zero membrane. Exact within the range given at
    /// [`STREAM_GRID`].
    pub fn inverse(&self, s: &ReversibleState, ctx: &mut Ctx) -> Result<ReversibleState> {
        if self.kind != EncoderKind::Reversible {
            return Err(Error::Config("residual blocks have no inverse".into()));
        }
        let (g, _) = self.mlp.forward(&s.x0.cast(), ctx)?;
        let x1 = s.x1.sub(&to_stream(&g))?.scale(2.0).sub(&s.x0)?;
        let (f, _) = self.attn.forward(&x1.cast(), ctx)?;
        let x0 = s.x0.sub(&to_stream(&f))?.scale(2.0).sub(&x1)?;
        Ok(ReversibleState { x0, x1 })
    }

    /// Gradients on the block inputs given gradients on its outputs.
    pub fn backward(&mut self, c: BlockCache, g: ReversibleState<f32>) -> Result<ReversibleState<f32>> {
        match self.kind {
            EncoderKind::Reversible => {
                // y1 = G(y0) + (x1 + y0) / 2
                let mut g_y0 = g.x0.add(&g.x1.scale(0.5))?;
                g_y0.add_assign(&self.mlp.backward(c.mlp, &g.x1)?)?;
                let mut g_x1 = g.x1.scale(0.5);
                // y0 = F(x1) + (x0 + x1) / 2
                let g_x0 = g_y0.scale(0.5);
                g_x1.add_assign(&g_y0.scale(0.5))?;
                g_x1.add_assign(&self.attn.backward(c.attn, &g_y0)?)?;
                Ok(ReversibleState { x0: g_x0, x1: g_x1 })
            }
            EncoderKind::Residual => {
                let g_y = g.x0.add(&g.x1)?;
                let mut g_mid = g_y.clone();
                g_mid.add_assign(&self.mlp.backward(c.mlp, &g_y)?)?;
                let mut g_x = g_mid.clone();
                g_x.add_assign(&self.attn.backward(c.attn, &g_mid)?)?;
                Ok(ReversibleState {
                    x0: g_x,
                    x1: Tensor::zeros(g.x1.shape()),
                })
            }
        }
    }
}

impl Module for EncoderBlock {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.attn.visit(&join(prefix, "attn"), v);
        self.mlp.visit(&join(prefix, "mlp"), v);
    }
}
