//! Binary spiking self-attention.
//!
//! `x -> LIF -> {q,k,v}: binary linear + BN -> LIF` gives spike tensors
//! Q, K, V. Per head and timestep `Attn = Q Kᵀ` is a nonnegative integer map,
//! binarized by a soft-reset LIF running over time and scaled by `λ_t`.
//! `B_Attn V` then goes through `LIF -> binary linear -> BN`.

use super::config::{AttentionMode, ModelConfig};
use super::layers::{SpikeCache, SpikeLayer};
use crate::binary::{apply_lambda, apply_lambda_backward, BinaryLinear, LambdaScale, LinearCache};
use crate::error::{Error, Result};
use crate::neuron::{lif_backward, lif_forward, LifParams, LifTrace, Reset, SpikeTrain};
use crate::numeric::{Rng, Tensor};
use crate::param::{join, Module, ParamKind, Visitor};
use crate::probe::Ctx;

#[derive(Clone, Copy, Debug)]
struct Dims {
    t: usize,
    b: usize,
    n: usize,
    d: usize,
    heads: usize,
}

impl Dims {
    fn dh(&self) -> usize {
        self.d / self.heads
    }

    /// Offset of token `i`, head `h` in a `[T, B, N, D]` tensor.
    fn tok(&self, t: usize, b: usize, i: usize, h: usize) -> usize {
        ((t * self.b + b) * self.n + i) * self.d + h * self.dh()
    }

    /// Offset of row `i` of the `(t, b, h)` map in a `[T, B, H, N, N]` tensor.
    fn map(&self, t: usize, b: usize, h: usize, i: usize) -> usize {
        (((t * self.b + b) * self.heads + h) * self.n + i) * self.n
    }

    fn map_shape(&self) -> [usize; 5] {
        [self.t, self.b, self.heads, self.n, self.n]
    }
}

/// `Attn[t, b, h, i, j] = Σ_c Q[t, b, i, h, c] K[t, b, j, h, c]`.
fn scores(q: &Tensor, k: &Tensor, dm: Dims) -> Tensor {
    let dh = dm.dh();
    let mut a = Tensor::zeros(&dm.map_shape());
    for t in 0..dm.t {
        for b in 0..dm.b {
            for h in 0..dm.heads {
                for i in 0..dm.n {
                    let qi = &q.data()[dm.tok(t, b, i, h)..][..dh];
                    let row = dm.map(t, b, h, i);
                    for j in 0..dm.n {
                        let kj = &k.data()[dm.tok(t, b, j, h)..][..dh];
                        let s: f32 = qi.iter().zip(kj).map(|(x, y)| x * y).sum();
                        a.data_mut()[row + j] = s;
                    }
                }
            }
        }
    }
    a
}

/// `O[t, b, i, h, :] = Σ_j W[t, b, h, i, j] V[t, b, j, h, :]`.
fn weighted_values(w: &Tensor, v: &Tensor, dm: Dims) -> Tensor {
    let dh = dm.dh();
    let mut o = Tensor::zeros(&[dm.t, dm.b, dm.n, dm.d]);
    for t in 0..dm.t {
        for b in 0..dm.b {
            for h in 0..dm.heads {
                for i in 0..dm.n {
                    let row = dm.map(t, b, h, i);
                    let oi = dm.tok(t, b, i, h);
                    for j in 0..dm.n {
                        let wij = w.data()[row + j];
                        if wij == 0.0 {
                            continue;
                        }
                        let vj = dm.tok(t, b, j, h);
                        for c in 0..dh {
                            let val = v.data()[vj + c];
                            o.data_mut()[oi + c] += wij * val;
                        }
                    }
                }
            }
        }
    }
    o
}

/// Learnable attention block.
#[derive(Clone, Debug)]
pub struct Bssa {
    name: String,
    heads: usize,
    mode: AttentionMode,
    attn_scale: f32,
    input_neuron: SpikeLayer,
    q_proj: BinaryLinear,
    k_proj: BinaryLinear,
    v_proj: BinaryLinear,
    q_neuron: SpikeLayer,
    k_neuron: SpikeLayer,
    v_neuron: SpikeLayer,
    attn_neuron: LifParams,
    pub lam: LambdaScale,
    grad_lam: Vec<f32>,
    out_neuron: SpikeLayer,
    out_proj: BinaryLinear,
}

#[derive(Debug)]
pub struct BssaCache {
    dims: Dims,
    input: SpikeCache,
    q_lin: LinearCache,
    k_lin: LinearCache,
    v_lin: LinearCache,
    q_spk: SpikeCache,
    k_spk: SpikeCache,
    v_spk: SpikeCache,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Binarized map and its LIF trace (binary mode only).
    attn_lif: Option<(SpikeTrain, LifTrace)>,
    weights: Tensor,
    out_spk: SpikeCache,
    out_lin: LinearCache,
}

impl Bssa {
    pub fn new(name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let hr = cfg.neuron(Reset::Hard);
        let d = cfg.embed_dim;
        let clip = cfg.ste_clip as f32;
        let lin = |n: &str, rng: &mut Rng| {
            BinaryLinear::new(&join(name, n), d, d, cfg.weights, cfg.standardize, clip, rng)
        };
        let q_proj = lin("q", rng);
        let k_proj = lin("k", rng);
        let v_proj = lin("v", rng);
        let out_proj = lin("out", rng);
        let spk = |n: &str| SpikeLayer::new(&join(name, n), hr);
        Self {
            name: name.to_string(),
            heads: cfg.heads,
            mode: cfg.attention,
            attn_scale: cfg.attn_scale as f32,
            input_neuron: spk("lif_in"),
            q_proj,
            k_proj,
            v_proj,
            q_neuron: spk("lif_q"),
            k_neuron: spk("lif_k"),
            v_neuron: spk("lif_v"),
            attn_neuron: cfg.neuron(Reset::Soft),
            lam: LambdaScale::ones(cfg.timesteps),
            grad_lam: vec![0.0; cfg.timesteps],
            out_neuron: spk("lif_out"),
            out_proj,
        }
    }

    pub fn projections(&self) -> [&BinaryLinear; 4] {
        [&self.q_proj, &self.k_proj, &self.v_proj, &self.out_proj]
    }

    pub fn grad_lambda(&self) -> &[f32] {
        &self.grad_lam
    }

    /// Binarized, scaled attention weights from an integer map `[T, B, H, N, N]`.
    fn binarize_map(&self, a: &Tensor) -> Result<(Tensor, Option<(SpikeTrain, LifTrace)>)> {
        match self.mode {
            AttentionMode::Binary => {
                let (s, trace) = lif_forward(a, &self.attn_neuron)?;
                let w = apply_lambda(&s, &self.lam.values)?;
                Ok((w, Some((s, trace))))
            }
            AttentionMode::Real => Ok((a.scale(self.attn_scale), None)),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, BssaCache)> {
        let &[t, b, n, d] = x.shape() else {
            return Err(Error::dim("bssa", x.shape(), &[0, 0, 0, self.q_proj.in_features()]));
        };
        if d != self.q_proj.in_features() {
            return Err(Error::dim("bssa", x.shape(), &[t, b, n, self.q_proj.in_features()]));
        }
        let dims = Dims {
            t,
            b,
            n,
            d,
            heads: self.heads,
        };
        let (xs, input) = self.input_neuron.forward(x, ctx)?;
        let (qz, q_lin) = self.q_proj.forward(&xs, ctx)?;
        let (kz, k_lin) = self.k_proj.forward(&xs, ctx)?;
        let (vz, v_lin) = self.v_proj.forward(&xs, ctx)?;
        let (q, q_spk) = self.q_neuron.forward(&qz, ctx)?;
        let (k, k_spk) = self.k_neuron.forward(&kz, ctx)?;
        let (v, v_spk) = self.v_neuron.forward(&vz, ctx)?;

        let a = scores(&q, &k, dims);
        if let Some(pos) = a.data().iter().position(|&v| v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Invariant(format!(
                "{}: attention entry {pos} is {} (Q/K are not spikes)",
                self.name,
                a.data()[pos]
            )));
        }
        let (weights, attn_lif) = self.binarize_map(&a)?;
        if let Some(p) = ctx.probe.as_mut() {
            // AND hits of Q Kᵀ plus one accumulate per active weight and V spike
            let qk: f64 = a.data().iter().map(|&v| v as f64).sum();
            let mut wv = 0u64;
            let dh = dims.dh();
            for tt in 0..t {
                for bb in 0..b {
                    for h in 0..self.heads {
                        let v_counts: Vec<u64> = (0..n)
                            .map(|j| {
                                let o = dims.tok(tt, bb, j, h);
                                v.data()[o..o + dh].iter().filter(|&&s| s != 0.0).count() as u64
                            })
                            .collect();
                        for i in 0..n {
                            let row = dims.map(tt, bb, h, i);
                            for (j, vc) in v_counts.iter().enumerate() {
                                if weights.data()[row + j] != 0.0 {
                                    wv += vc;
                                }
                            }
                        }
                    }
                }
            }
            p.attention_accumulations += qk as u64 + wv;
        }
        let o = weighted_values(&weights, &v, dims);
        let (os, out_spk) = self.out_neuron.forward(&o, ctx)?;
        let (y, out_lin) = self.out_proj.forward(&os, ctx)?;
        Ok((
            y,
            BssaCache {
                dims,
                input,
                q_lin,
                k_lin,
                v_lin,
                q_spk,
                k_spk,
                v_spk,
                q,
                k,
                v,
                attn_lif,
                weights,
                out_spk,
                out_lin,
            },
        ))
    }

    pub fn backward(&mut self, c: BssaCache, grad: &Tensor) -> Result<Tensor> {
        let dm = c.dims;
        let dh = dm.dh();
        let g_os = self.out_proj.backward(c.out_lin, grad)?;
        let g_o = self.out_neuron.backward(c.out_spk, &g_os)?;

        // O = W V
        let mut g_w = Tensor::zeros(&dm.map_shape());
        let mut g_v = Tensor::zeros(c.v.shape());
        for t in 0..dm.t {
            for b in 0..dm.b {
                for h in 0..dm.heads {
                    for i in 0..dm.n {
                        let row = dm.map(t, b, h, i);
                        let oi = dm.tok(t, b, i, h);
                        let go = &g_o.data()[oi..oi + dh];
                        for j in 0..dm.n {
                            let vj = dm.tok(t, b, j, h);
                            let dot: f32 =
                                go.iter().zip(&c.v.data()[vj..vj + dh]).map(|(x, y)| x * y).sum();
                            g_w.data_mut()[row + j] = dot;
                            let wij = c.weights.data()[row + j];
                            if wij != 0.0 {
                                for (cc, &g) in go.iter().enumerate() {
                                    g_v.data_mut()[vj + cc] += wij * g;
                                }
                            }
                        }
                    }
                }
            }
        }

        let g_a = match (&self.mode, c.attn_lif) {
            (AttentionMode::Binary, Some((s, trace))) => {
                let (g_s, g_lam) = apply_lambda_backward(s.as_tensor(), &self.lam.values, &g_w)?;
                self.grad_lam.iter_mut().zip(&g_lam).for_each(|(a, b)| *a += b);
                lif_backward(&trace, &s, &g_s, &self.attn_neuron)?
            }
            _ => g_w.scale(self.attn_scale),
        };

        // A = Q Kᵀ
        let mut g_q = Tensor::zeros(c.q.shape());
        let mut g_k = Tensor::zeros(c.k.shape());
        for t in 0..dm.t {
            for b in 0..dm.b {
                for h in 0..dm.heads {
                    for i in 0..dm.n {
                        let row = dm.map(t, b, h, i);
                        let qi = dm.tok(t, b, i, h);
                        for j in 0..dm.n {
                            let ga = g_a.data()[row + j];
                            if ga == 0.0 {
                                continue;
                            }
                            let kj = dm.tok(t, b, j, h);
                            for cc in 0..dh {
                                let kv = c.k.data()[kj + cc];
                                let qv = c.q.data()[qi + cc];
                                g_q.data_mut()[qi + cc] += ga * kv;
                                g_k.data_mut()[kj + cc] += ga * qv;
                            }
                        }
                    }
                }
            }
        }

        let g_qz = self.q_neuron.backward(c.q_spk, &g_q)?;
        let g_kz = self.k_neuron.backward(c.k_spk, &g_k)?;
        let g_vz = self.v_neuron.backward(c.v_spk, &g_v)?;
        let mut g_xs = self.q_proj.backward(c.q_lin, &g_qz)?;
        g_xs.add_assign(&self.k_proj.backward(c.k_lin, &g_kz)?)?;
        g_xs.add_assign(&self.v_proj.backward(c.v_lin, &g_vz)?)?;
        self.input_neuron.backward(c.input, &g_xs)
    }
}

impl Module for Bssa {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        self.q_proj.visit(&join(prefix, "q"), v);
        self.k_proj.visit(&join(prefix, "k"), v);
        self.v_proj.visit(&join(prefix, "v"), v);
        if self.mode == AttentionMode::Binary {
            let t = [self.lam.values.len()];
            v.param(&join(prefix, "lambda"), &t, &mut self.lam.values, &mut self.grad_lam, ParamKind::Scale);
        }
        self.out_proj.visit(&join(prefix, "out"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::boolean_binarize;

    fn dims(t: usize, n: usize, d: usize, heads: usize) -> Dims {
        Dims {
            t,
            b: 1,
            n,
            d,
            heads,
        }
    }

    #[test]
    fn scores_are_bounded_nonnegative_integers() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let dm = dims(2, 5, 12, 3);
            let q = rng.spike_tensor(&[2, 1, 5, 12], 0.5);
            let k = rng.spike_tensor(&[2, 1, 5, 12], 0.5);
            let a = scores(&q, &k, dm);
            // brute force over the flat layout
            for t in 0..2 {
                for h in 0..3 {
                    for i in 0..5 {
                        for j in 0..5 {
                            let mut s = 0.0;
                            for c in 0..4 {
                                s += q.data()[(t * 5 + i) * 12 + h * 4 + c]
                                    * k.data()[(t * 5 + j) * 12 + h * 4 + c];
                            }
                            assert_eq!(a.data()[((t * 3 + h) * 5 + i) * 5 + j], s);
                        }
                    }
                }
            }
            assert!(a.data().iter().all(|&v| v >= 0.0 && v <= 4.0 && v.fract() == 0.0));
        }
    }

    #[test]
    fn soft_reset_map_on_single_token() {
        // N = 1, one head: the map per timestep is the trace [4, 0, 0, 0]
        let mut cfg = ModelConfig::vector(1, 4, 4, 2, 1, 4);
        cfg.heads = 1;
        let blk = Bssa::new("a", &cfg, &mut Rng::new(0));
        let a = Tensor::new(&[4, 1, 1, 1, 1], vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        let (w, _) = blk.binarize_map(&a).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(boolean_binarize(&a).as_tensor().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn silent_values_give_zero_product() {
        let dm = dims(2, 3, 4, 1);
        let w = Tensor::full(&dm.map_shape(), 1.0);
        let v = Tensor::zeros(&[2, 1, 3, 4]);
        assert_eq!(weighted_values(&w, &v, dm).max_abs(), 0.0);
    }

    #[test]
    fn forward_shape_and_accumulations() {
        let cfg = ModelConfig::vector(1, 16, 2, 3, 4, 8);
        let blk = Bssa::new("a", &cfg, &mut Rng::new(1));
        let x = Rng::new(2).normal_tensor(&[2, 3, 4, 16], 2.0);
        let mut ctx = Ctx::probed(crate::probe::Probe::counting());
        let (y, _) = blk.forward(&x, &mut ctx).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.is_finite());
        assert_eq!(ctx.probe.unwrap().layers.len(), 4);
    }
}
