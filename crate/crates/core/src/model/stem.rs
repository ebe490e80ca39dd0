//! Binary spiking patch splitting: turns a static input into a `[T, B, N, D]`
//! token stream. The input is normalized, repeated over `T` timesteps
//! (direct encoding) and passed through LIF -> binary projection -> BN stages.

use super::config::{ModelConfig, StemSpec};
use super::layers::{BatchNormLayer, SpikeCache, SpikeLayer};
use crate::binary::{BinaryLinear, LinearCache};
use crate::error::{Error, Result};
use crate::neuron::Reset;
use crate::numeric::{BnCache, Rng, Tensor};
use crate::param::{join, Module, Visitor};
use crate::probe::Ctx;

/// 3x3, stride 1, zero-padded patches of a channels-last image batch
/// `[M, H, W, C]`, returned as `[M * H * W, 9 * C]` with column
/// `(ky * 3 + kx) * C + c`.
pub fn im2col3(x: &Tensor, m: usize, h: usize, w: usize, c: usize) -> Tensor {
    let mut out = Tensor::zeros(&[m * h * w, 9 * c]);
    let src = x.data();
    let dst = out.data_mut();
    for mi in 0..m {
        for y in 0..h {
            for xx in 0..w {
                let row = ((mi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = ((mi * h + sy as usize) * w + sx as usize) * c;
                        let d = row + (ky * 3 + kx) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col3`].
pub fn col2im3(cols: &Tensor, m: usize, h: usize, w: usize, c: usize) -> Tensor {
    let mut out = Tensor::zeros(&[m, h, w, c]);
    let src = cols.data();
    let dst = out.data_mut();
    for mi in 0..m {
        for y in 0..h {
            for xx in 0..w {
                let row = ((mi * h + y) * w + xx) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = ((mi * h + sy as usize) * w + sx as usize) * c;
                        let d = row + (ky * 3 + kx) * c;
                        for ci in 0..c {
                            dst[s + ci] += src[d + ci];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2x2 stride-2 max pool over `[M, H, W, C]`; returns the output and the
/// flat source index of every maximum.
fn max_pool2(x: &Tensor, m: usize, h: usize, w: usize, c: usize) -> (Tensor, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[m, ho, wo, c]);
    let mut arg = vec![0usize; m * ho * wo * c];
    for mi in 0..m {
        for y in 0..ho {
            for xx in 0..wo {
                for ci in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((mi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ci;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            bi = idx;
                        }
                    }
                    let o = ((mi * ho + y) * wo + xx) * c + ci;
                    out.data_mut()[o] = best;
                    arg[o] = bi;
                }
            }
        }
    }
    (out, arg)
}

#[derive(Clone, Debug)]
struct ConvStageLayer {
    neuron: SpikeLayer,
    conv: BinaryLinear,
    pool: bool,
}

#[derive(Debug)]
enum StageCache {
    Conv {
        spike: SpikeCache,
        conv: LinearCache,
        pool_arg: Option<Vec<usize>>,
        dims: (usize, usize, usize, usize, usize),
    },
    Linear {
        spike: SpikeCache,
        proj: LinearCache,
    },
}

#[derive(Clone, Debug)]
enum StemBody {
    Conv {
        in_channels: usize,
        height: usize,
        width: usize,
        stages: Vec<ConvStageLayer>,
    },
    Linear {
        tokens: usize,
        patch_dim: usize,
        neuron: SpikeLayer,
        proj: BinaryLinear,
    },
}

#[derive(Clone, Debug)]
pub struct Stem {
    timesteps: usize,
    embed_dim: usize,
    input_bn: BatchNormLayer,
    body: StemBody,
}

#[derive(Debug)]
pub struct StemCache {
    input_bn: BnCache,
    stages: Vec<StageCache>,
    batch: usize,
}

impl Stem {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let neuron = cfg.neuron(Reset::Hard);
        let clip = cfg.ste_clip as f32;
        let (input_bn, body) = match &cfg.stem {
            StemSpec::Conv {
                in_channels,
                height,
                width,
                stages,
            } => {
                let mut layers = Vec::with_capacity(stages.len());
                let mut cin = *in_channels;
                for (i, s) in stages.iter().enumerate() {
                    layers.push(ConvStageLayer {
                        neuron: SpikeLayer::new(&format!("stem.{i}.lif"), neuron),
                        conv: BinaryLinear::new(
                            &format!("stem.{i}.conv"),
                            9 * cin,
                            s.out_channels,
                            cfg.weights,
                            cfg.standardize,
                            clip,
                            rng,
                        ),
                        pool: s.pool,
                    });
                    cin = s.out_channels;
                }
                (
                    BatchNormLayer::new(*in_channels),
                    StemBody::Conv {
                        in_channels: *in_channels,
                        height: *height,
                        width: *width,
                        stages: layers,
                    },
                )
            }
            StemSpec::Linear { tokens, patch_dim } => (
                BatchNormLayer::new(tokens * patch_dim),
                StemBody::Linear {
                    tokens: *tokens,
                    patch_dim: *patch_dim,
                    neuron: SpikeLayer::new("stem.lif", neuron),
                    proj: BinaryLinear::new(
                        "stem.proj",
                        *patch_dim,
                        cfg.embed_dim,
                        cfg.weights,
                        cfg.standardize,
                        clip,
                        rng,
                    ),
                },
            ),
        };
        Self {
            timesteps: cfg.timesteps,
            embed_dim: cfg.embed_dim,
            input_bn,
            body,
        }
    }

    /// Binary layers of the stem, in forward order.
    pub fn projections(&self) -> Vec<&BinaryLinear> {
        match &self.body {
            StemBody::Conv { stages, .. } => stages.iter().map(|s| &s.conv).collect(),
            StemBody::Linear { proj, .. } => vec![proj],
        }
    }

    pub fn input_bn(&self) -> &BatchNormLayer {
        &self.input_bn
    }

    fn repeat_t(&self, x: &Tensor) -> Result<Tensor> {
        let mut shape = vec![self.timesteps];
        shape.extend_from_slice(x.shape());
        let mut data = Vec::with_capacity(x.len() * self.timesteps);
        for _ in 0..self.timesteps {
            data.extend_from_slice(x.data());
        }
        Tensor::new(&shape, data)
    }

    /// `[B, ...sample]` -> `[T, B, N, D]`.
    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, StemCache)> {
        let t = self.timesteps;
        let batch = x.shape()[0];
        match &self.body {
            StemBody::Conv {
                in_channels,
                height,
                width,
                stages,
            } => {
                let (c, h, w) = (*in_channels, *height, *width);
                if x.shape() != [batch, c, h, w] {
                    return Err(Error::dim("stem", x.shape(), &[batch, c, h, w]));
                }
                // NCHW -> NHWC
                let nhwc = Tensor::from_fn(&[batch, h, w, c], |i| {
                    let ci = i % c;
                    let xx = (i / c) % w;
                    let y = (i / (c * w)) % h;
                    let b = i / (c * w * h);
                    x.data()[((b * c + ci) * h + y) * w + xx]
                });
                let (normed, bn_cache) = self.input_bn.forward(&nhwc, ctx)?;
                let mut cur = self.repeat_t(&normed)?;
                let (mut h, mut w, mut c) = (h, w, c);
                let m = t * batch;
                let mut caches = Vec::with_capacity(stages.len());
                for st in stages {
                    let (spk, spike) = st.neuron.forward(&cur, ctx)?;
                    let cols = im2col3(&spk, m, h, w, c);
                    let (y, conv) = st.conv.forward(&cols, ctx)?;
                    let cout = st.conv.out_features();
                    let y = y.reshape(&[m, h, w, cout])?;
                    let dims = (m, h, w, c, cout);
                    let (y, pool_arg) = if st.pool {
                        let (p, arg) = max_pool2(&y, m, h, w, cout);
                        h /= 2;
                        w /= 2;
                        (p, Some(arg))
                    } else {
                        (y, None)
                    };
                    c = cout;
                    cur = y.reshape(&[t, batch, h, w, c])?;
                    caches.push(StageCache::Conv {
                        spike,
                        conv,
                        pool_arg,
                        dims,
                    });
                }
                let out = cur.reshape(&[t, batch, h * w, self.embed_dim])?;
                Ok((
                    out,
                    StemCache {
                        input_bn: bn_cache,
                        stages: caches,
                        batch,
                    },
                ))
            }
            StemBody::Linear {
                tokens,
                patch_dim,
                neuron,
                proj,
            } => {
                let f = tokens * patch_dim;
                if x.shape() != [batch, f] {
                    return Err(Error::dim("stem", x.shape(), &[batch, f]));
                }
                let (normed, bn_cache) = self.input_bn.forward(x, ctx)?;
                let cur = self.repeat_t(&normed)?.reshape(&[t, batch, *tokens, *patch_dim])?;
                let (spk, spike) = neuron.forward(&cur, ctx)?;
                let (y, pc) = proj.forward(&spk, ctx)?;
                Ok((
                    y,
                    StemCache {
                        input_bn: bn_cache,
                        stages: vec![StageCache::Linear { spike, proj: pc }],
                        batch,
                    },
                ))
            }
        }
    }

    pub fn backward(&mut self, cache: StemCache, grad: &Tensor) -> Result<()> {
        let t = self.timesteps;
        let batch = cache.batch;
        let g_input = match &mut self.body {
            StemBody::Conv { stages, .. } => {
                let mut g = grad.clone();
                for (st, sc) in stages.iter_mut().zip(cache.stages).rev() {
                    let StageCache::Conv {
                        spike,
                        conv,
                        pool_arg,
                        dims: (m, h, w, c, cout),
                    } = sc
                    else {
                        unreachable!("conv stem caches conv stages")
                    };
                    let g_y = match pool_arg {
                        Some(arg) => {
                            let mut up = Tensor::zeros(&[m * h * w, cout]);
                            for (o, &src) in arg.iter().enumerate() {
                                up.data_mut()[src] += g.data()[o];
                            }
                            up
                        }
                        None => g.reshape(&[m * h * w, cout])?,
                    };
                    let g_cols = st.conv.backward(conv, &g_y)?;
                    let g_spk = col2im3(&g_cols, m, h, w, c).reshape(&[t, m / t * h * w * c])?;
                    g = st.neuron.backward(spike, &g_spk)?;
                }
                g
            }
            StemBody::Linear { neuron, proj, .. } => {
                let Some(StageCache::Linear { spike, proj: pc }) = cache.stages.into_iter().next()
                else {
                    unreachable!("linear stem caches one stage")
                };
                let g_spk = proj.backward(pc, grad)?;
                neuron.backward(spike, &g_spk)?
            }
        };
        // sum over the repeated time axis
        let inner = g_input.len() / t;
        let mut g = Tensor::from_fn(cache.input_bn.xhat.shape(), |i| {
            (0..t).map(|ti| g_input.data()[ti * inner + i]).sum()
        });
        debug_assert_eq!(g.len() / cache.input_bn.xhat.last_dim(), cache.input_bn.rows);
        g = g.reshape(cache.input_bn.xhat.shape())?;
        let _ = batch;
        self.input_bn.backward(cache.input_bn, &g)?;
        Ok(())
    }
}

impl Module for Stem {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.input_bn.visit(&join(prefix, "input_bn"), v);
        match &mut self.body {
            StemBody::Conv { stages, .. } => {
                for (i, s) in stages.iter_mut().enumerate() {
                    s.conv.visit(&join(prefix, &format!("stage{i}.conv")), v);
                }
            }
            StemBody::Linear { proj, .. } => proj.visit(&join(prefix, "proj"), v),
        }
    }
}
