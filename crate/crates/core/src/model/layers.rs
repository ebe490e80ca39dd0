//! Small building blocks: spiking neuron layers, a standalone normalization
//! layer, and the full-precision classifier heads.

use crate::error::{Error, Result};
use crate::neuron::{lif_backward, lif_forward, LifParams, LifTrace, SpikeTrain};
use crate::numeric::{
    bn_backward, bn_forward, linear_rows, linear_rows_grad_input, linear_rows_grad_weight,
    BatchNormParams, BnCache, Rng, Scalar, Tensor,
};
use crate::param::{join, Module, ParamKind, Visitor};
use crate::probe::Ctx;

/// A population of LIF neurons over a leading time axis.
#[derive(Clone, Debug)]
pub struct SpikeLayer {
    pub name: String,
    pub params: LifParams,
}

#[derive(Debug)]
pub struct SpikeCache {
    trace: LifTrace,
    spikes: SpikeTrain,
}

impl SpikeLayer {
    pub fn new(name: &str, params: LifParams) -> Self {
        Self {
            name: name.to_string(),
            params,
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, SpikeCache)> {
        ctx.record_pre_spike(&self.name, x);
        let (spikes, trace) = lif_forward(x, &self.params)?;
        Ok((spikes.as_tensor().clone(), SpikeCache { trace, spikes }))
    }

    pub fn backward(&self, cache: SpikeCache, grad: &Tensor) -> Result<Tensor> {
        lif_backward(&cache.trace, &cache.spikes, grad, &self.params)
    }
}

/// Batch normalization over the last axis with trainable affine terms.
#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub params: BatchNormParams,
    grad_gamma: Vec<f32>,
    grad_beta: Vec<f32>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        Self {
            params: BatchNormParams::new(channels),
            grad_gamma: vec![0.0; channels],
            grad_beta: vec![0.0; channels],
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<(Tensor, BnCache)> {
        bn_forward(x, &self.params, ctx.train)
    }

    pub fn backward(&mut self, cache: BnCache, grad: &Tensor) -> Result<Tensor> {
        let (gx, gg, gb) = bn_backward(&cache, &self.params.gamma, grad)?;
        self.params.update_running(&cache);
        self.grad_gamma.iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
        self.grad_beta.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
        Ok(gx)
    }
}

impl Module for BatchNormLayer {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let c = [self.params.channels()];
        v.param(&join(prefix, "gamma"), &c, &mut self.params.gamma, &mut self.grad_gamma, ParamKind::Bias);
        v.param(&join(prefix, "beta"), &c, &mut self.params.beta, &mut self.grad_beta, ParamKind::Bias);
        v.buffer(&join(prefix, "running_mean"), &mut self.params.running_mean);
        v.buffer(&join(prefix, "running_var"), &mut self.params.running_var);
    }
}

/// Full-precision linear classifier over a `[T, B, N, D]` stream averaged
/// over time and tokens.
#[derive(Clone, Debug)]
pub struct Head<F = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    grad_w: Tensor<F>,
    grad_b: Tensor<F>,
}

#[derive(Debug)]
pub struct HeadCache<F = f32> {
    pooled: Tensor<F>,
    stream_shape: Vec<usize>,
}

impl<F: Scalar> Head<F> {
    pub fn new(dim: usize, classes: usize, rng: &mut Rng) -> Self {
        let weight = rng.normal_tensor(&[classes, dim], 0.02).cast();
        Self {
            grad_w: Tensor::zeros(weight.shape()),
            weight,
            bias: Tensor::zeros(&[classes]),
            grad_b: Tensor::zeros(&[classes]),
        }
    }

    pub fn zeroed(dim: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[classes, dim]),
            bias: Tensor::zeros(&[classes]),
            grad_w: Tensor::zeros(&[classes, dim]),
            grad_b: Tensor::zeros(&[classes]),
        }
    }

    pub fn grad_weight(&self) -> &Tensor<F> {
        &self.grad_w
    }

    pub fn grad_bias(&self) -> &Tensor<F> {
        &self.grad_b
    }

    /// Arithmetic mean over the time and token axes: `[T, B, N, D] -> [B, D]`.
    pub fn pool(stream: &Tensor<F>) -> Result<Tensor<F>> {
        let &[t, b, n, d] = stream.shape() else {
            return Err(Error::dim("pool", stream.shape(), &[]));
        };
        let mut out = Tensor::zeros(&[b, d]);
        let scale = F::one() / F::from_usize(t * n).unwrap();
        for ti in 0..t {
            for bi in 0..b {
                for ni in 0..n {
                    let off = ((ti * b + bi) * n + ni) * d;
                    let row = &stream.data()[off..off + d];
                    let o = &mut out.data_mut()[bi * d..(bi + 1) * d];
                    o.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
                }
            }
        }
        Ok(out.scale(scale))
    }

    pub fn logits_from_pooled(&self, pooled: &Tensor<F>) -> Result<Tensor<F>> {
        let mut y = linear_rows(pooled, &self.weight)?;
        let c = self.bias.len();
        for r in 0..y.rows() {
            for k in 0..c {
                y.data_mut()[r * c + k] = y.data()[r * c + k] + self.bias.data()[k];
            }
        }
        Ok(y)
    }

    pub fn forward(&self, stream: &Tensor<F>) -> Result<(Tensor<F>, HeadCache<F>)> {
        let pooled = Self::pool(stream)?;
        let y = self.logits_from_pooled(&pooled)?;
        Ok((
            y,
            HeadCache {
                pooled,
                stream_shape: stream.shape().to_vec(),
            },
        ))
    }

    pub fn backward(&mut self, cache: HeadCache<F>, grad: &Tensor<F>) -> Result<Tensor<F>> {
        self.grad_w.add_assign(&linear_rows_grad_weight(grad, &cache.pooled)?)?;
        let c = self.bias.len();
        for r in 0..grad.rows() {
            for k in 0..c {
                self.grad_b.data_mut()[k] = self.grad_b.data()[k] + grad.data()[r * c + k];
            }
        }
        let g_pooled = linear_rows_grad_input(grad, &self.weight)?;
        let &[t, b, n, d] = cache.stream_shape.as_slice() else {
            unreachable!("pooled stream is 4-D")
        };
        let scale = F::one() / F::from_usize(t * n).unwrap();
        Ok(Tensor::from_fn(&cache.stream_shape, |i| {
            let bi = (i / (n * d)) % b;
            g_pooled.data()[bi * d + i % d] * scale
        }))
    }
}

impl Module for Head<f32> {
    fn visit(&mut self, prefix: &str, v: &mut dyn Visitor) {
        let ws = self.weight.shape().to_vec();
        let bs = self.bias.shape().to_vec();
        v.param(&join(prefix, "weight"), &ws, self.weight.data_mut(), self.grad_w.data_mut(), ParamKind::Weight);
        v.param(&join(prefix, "bias"), &bs, self.bias.data_mut(), self.grad_b.data_mut(), ParamKind::Bias);
    }
}
