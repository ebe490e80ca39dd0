use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Real matrix product of two 2-D tensors.
///
/// Each output element accumulates its contraction terms strictly in
/// increasing `k` order, so results are reproducible bit for bit.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == F::zero() {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o = *o + av * bv);
        }
    }
    Tensor::new(&[m, n], out)
}

/// Row-wise linear map `y[r] = W x[r]` where `x` is viewed as
/// `[rows, in]` and `w` is `[out, in]`. The output keeps the leading
/// axes of `x` with the last replaced by `out`.
pub fn linear_rows<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    let [out_f, in_f] = w.dims2("linear_rows")?;
    if x.last_dim() != in_f {
        return Err(Error::dim("linear_rows", x.shape(), w.shape()));
    }
    let rows = x.rows();
    let mut out = vec![F::zero(); rows * out_f];
    for r in 0..rows {
        let xr = x.row(r);
        for o in 0..out_f {
            let wr = &w.data()[o * in_f..(o + 1) * in_f];
            out[r * out_f + o] = xr
                .iter()
                .zip(wr)
                .fold(F::zero(), |acc, (&a, &b)| acc + a * b);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    Tensor::new(&shape, out)
}

/// Backward of [`linear_rows`] with respect to its input: `g W`.
pub fn linear_rows_grad_input<F: Scalar>(g: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    let [out_f, in_f] = w.dims2("linear_rows_grad_input")?;
    if g.last_dim() != out_f {
        return Err(Error::dim("linear_rows_grad_input", g.shape(), w.shape()));
    }
    let rows = g.rows();
    let mut out = vec![F::zero(); rows * in_f];
    for r in 0..rows {
        let orow = &mut out[r * in_f..(r + 1) * in_f];
        for (o, &gv) in g.row(r).iter().enumerate() {
            if gv == F::zero() {
                continue;
            }
            let wr = &w.data()[o * in_f..(o + 1) * in_f];
            orow.iter_mut().zip(wr).for_each(|(a, &b)| *a = *a + gv * b);
        }
    }
    let mut shape = g.shape().to_vec();
    *shape.last_mut().unwrap() = in_f;
    Tensor::new(&shape, out)
}

/// Backward of [`linear_rows`] with respect to the weight: `gᵀ x`, shape `[out, in]`.
pub fn linear_rows_grad_weight<F: Scalar>(g: &Tensor<F>, x: &Tensor<F>) -> Result<Tensor<F>> {
    if g.rows() != x.rows() {
        return Err(Error::dim("linear_rows_grad_weight", g.shape(), x.shape()));
    }
    let (out_f, in_f) = (g.last_dim(), x.last_dim());
    let mut out = vec![F::zero(); out_f * in_f];
    for r in 0..g.rows() {
        let xr = x.row(r);
        for (o, &gv) in g.row(r).iter().enumerate() {
            if gv == F::zero() {
                continue;
            }
            let orow = &mut out[o * in_f..(o + 1) * in_f];
            orow.iter_mut().zip(xr).for_each(|(a, &b)| *a = *a + gv * b);
        }
    }
    Tensor::new(&[out_f, in_f], out)
}

/// Per-channel batch-normalization parameters. Channels live on the last axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams<F = f32> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
    pub epsilon: F,
    pub momentum: F,
}

impl<F: Scalar> BatchNormParams<F> {
    /// Identity-initialized parameters: gamma 1, beta 0, running stats (0, 1),
    /// epsilon 1e-5, momentum 0.1.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![F::one(); channels],
            beta: vec![F::zero(); channels],
            running_mean: vec![F::zero(); channels],
            running_var: vec![F::one(); channels],
            epsilon: F::lit(1e-5),
            momentum: F::lit(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds a batch's statistics into the running estimates.
    pub fn update_running(&mut self, cache: &BnCache<F>) {
        if !cache.training {
            return;
        }
        let m = self.momentum;
        let n = F::from_usize(cache.rows).unwrap();
        let unbias = if cache.rows > 1 { n / (n - F::one()) } else { F::one() };
        for c in 0..self.channels() {
            self.running_mean[c] = (F::one() - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] =
                (F::one() - m) * self.running_var[c] + m * cache.var[c] * unbias;
        }
    }
}

/// Values saved by [`bn_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<F = f32> {
    pub xhat: Tensor<F>,
    pub inv_std: Vec<F>,
    pub mean: Vec<F>,
    pub var: Vec<F>,
    pub rows: usize,
    pub training: bool,
}

/// Normalize-scale-shift without touching running statistics.
pub fn bn_forward<F: Scalar>(
    x: &Tensor<F>,
    p: &BatchNormParams<F>,
    training: bool,
) -> Result<(Tensor<F>, BnCache<F>)> {
    let c = p.channels();
    if x.last_dim() != c {
        return Err(Error::dim("batch_norm", x.shape(), &[c]));
    }
    let rows = x.rows();
    let (mean, var) = if training {
        let n = F::from_usize(rows).unwrap();
        let mut mean = vec![F::zero(); c];
        for r in 0..rows {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, &v)| *m = *m + v);
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![F::zero(); c];
        for r in 0..rows {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s = *s + (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / n);
        (mean, var)
    } else {
        (p.running_mean.clone(), p.running_var.clone())
    };
    let mut inv_std = Vec::with_capacity(c);
    for (ch, &v) in var.iter().enumerate() {
        let d = v + p.epsilon;
        if !(d > F::zero()) {
            return Err(Error::Numeric(format!(
                "batch_norm: non-positive variance {d} on channel {ch}"
            )));
        }
        inv_std.push(F::one() / d.sqrt());
    }
    let mut xhat = x.clone();
    let mut y = x.clone();
    for r in 0..rows {
        let off = r * c;
        for ch in 0..c {
            let h = (x.data()[off + ch] - mean[ch]) * inv_std[ch];
            xhat.data_mut()[off + ch] = h;
            y.data_mut()[off + ch] = p.gamma[ch] * h + p.beta[ch];
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
            rows,
            training,
        },
    ))
}

/// Batch normalization. In training mode the batch statistics are used and
/// folded into the running estimates with `p.momentum`.
pub fn batch_norm<F: Scalar>(
    x: &Tensor<F>,
    p: &mut BatchNormParams<F>,
    training: bool,
) -> Result<Tensor<F>> {
    let (y, cache) = bn_forward(x, p, training)?;
    p.update_running(&cache);
    Ok(y)
}

/// Gradients of batch normalization: `(d input, d gamma, d beta)`.
pub fn bn_backward<F: Scalar>(
    cache: &BnCache<F>,
    gamma: &[F],
    grad: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    if grad.shape() != cache.xhat.shape() {
        return Err(Error::dim("bn_backward", grad.shape(), cache.xhat.shape()));
    }
    let c = gamma.len();
    let rows = cache.rows;
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for r in 0..rows {
        let g = grad.row(r);
        let h = cache.xhat.row(r);
        for ch in 0..c {
            dbeta[ch] = dbeta[ch] + g[ch];
            dgamma[ch] = dgamma[ch] + g[ch] * h[ch];
        }
    }
    let mut dx = grad.clone();
    if cache.training {
        let n = F::from_usize(rows).unwrap();
        for r in 0..rows {
            let off = r * c;
            for ch in 0..c {
                let g = grad.data()[off + ch];
                let h = cache.xhat.data()[off + ch];
                dx.data_mut()[off + ch] = gamma[ch] * cache.inv_std[ch] / n
                    * (n * g - dbeta[ch] - h * dgamma[ch]);
            }
        }
    } else {
        for r in 0..rows {
            let off = r * c;
            for ch in 0..c {
                dx.data_mut()[off + ch] = grad.data()[off + ch] * gamma[ch] * cache.inv_std[ch];
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}
