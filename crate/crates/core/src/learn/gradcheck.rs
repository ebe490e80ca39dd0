//! Analytic-versus-finite-difference checks on differentiable fragments of
//! the network, evaluated in `f64`.
//!
//! Errors are normwise: `max|analytic - numeric| / max(|analytic|∞, |numeric|∞)`
//! over each checked tensor; a fragment reports the worst tensor.

use serde::Serialize;

use super::loss::batch_cross_entropy;
use crate::binary::{apply_lambda, apply_lambda_backward};
use crate::error::Result;
use crate::model::Head;
use crate::neuron::{SpikeTrain, SurrogateKind, SurrogateSpec};
use crate::numeric::{bn_backward, bn_forward, finite_diff_grad, BatchNormParams, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub fragment: String,
    pub max_rel_error: f64,
    /// Number of scalar coordinates compared.
    pub coordinates: usize,
}

const H: f64 = 1e-6;

/// Normwise relative error between two gradients; both zero gives 0.
pub fn normwise_rel_error(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    let diff = a.max_abs_diff(b)?;
    let scale = a.max_abs().max(b.max_abs());
    Ok(if scale == 0.0 { diff } else { diff / scale })
}

struct Acc {
    worst: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> Result<()> {
        self.worst = self.worst.max(normwise_rel_error(analytic, numeric)?);
        self.n += analytic.len();
        Ok(())
    }
}

/// Normalization, per-timestep attention scale and cross-entropy:
/// `x [T, B, C] -> BN -> (λ_t S_t) ⊙ · -> mean over t -> CE`, with a fixed
/// spike mask `S`. Checks gradients on `x`, `γ`, `β` and `λ`.
pub fn check_bn_lambda_ce(seed: u64) -> Result<GradCheck> {
    let (t, b, c) = (3, 5, 4);
    let mut rng = Rng::new(seed);
    let x: Tensor<f64> = rng.normal_tensor(&[t, b, c], 1.5).cast();
    let mask = SpikeTrain::new(rng.spike_tensor(&[t, b, c], 0.6).cast::<f64>())?;
    let targets: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
    let mut bn = BatchNormParams::<f64>::new(c);
    bn.gamma = (0..c).map(|_| 0.5 + rng.uniform()).collect();
    bn.beta = (0..c).map(|_| rng.normal() * 0.3).collect();
    let lam: Vec<f64> = (0..t).map(|_| 0.5 + rng.uniform()).collect();

    let forward = |x: &Tensor<f64>, bn: &BatchNormParams<f64>, lam: &[f64]| -> Result<f64> {
        let (z, _) = bn_forward(x, bn, true)?;
        let w = apply_lambda(&mask, lam)?;
        let u = w.mul(&z)?;
        let logits = time_mean(&u, t, b, c);
        Ok(batch_cross_entropy(&logits, &targets)?.0)
    };

    // analytic
    let (z, cache) = bn_forward(&x, &bn, true)?;
    let w = apply_lambda(&mask, &lam)?;
    let logits = time_mean(&w.mul(&z)?, t, b, c);
    let (_, g_logits) = batch_cross_entropy(&logits, &targets)?;
    let g_u = Tensor::from_fn(&[t, b, c], |i| g_logits.data()[i % (b * c)] / t as f64);
    let (_, g_lam) = apply_lambda_backward(mask.as_tensor(), &lam, &g_u.mul(&z)?)?;
    let g_z = g_u.mul(&w)?;
    let (g_x, g_gamma, g_beta) = bn_backward(&cache, &bn.gamma, &g_z)?;

    let mut acc = Acc { worst: 0.0, n: 0 };
    acc.add(&g_x, &finite_diff_grad(|xi| forward(xi, &bn, &lam), &x, H)?)?;
    let vec_t = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec());
    let fd_gamma = finite_diff_grad(
        |g| {
            let mut p = bn.clone();
            p.gamma = g.data().to_vec();
            forward(&x, &p, &lam)
        },
        &vec_t(&bn.gamma)?,
        H,
    )?;
    acc.add(&vec_t(&g_gamma)?, &fd_gamma)?;
    let fd_beta = finite_diff_grad(
        |g| {
            let mut p = bn.clone();
            p.beta = g.data().to_vec();
            forward(&x, &p, &lam)
        },
        &vec_t(&bn.beta)?,
        H,
    )?;
    acc.add(&vec_t(&g_beta)?, &fd_beta)?;
    let fd_lam = finite_diff_grad(|l| forward(&x, &bn, l.data()), &vec_t(&lam)?, H)?;
    acc.add(&vec_t(&g_lam)?, &fd_lam)?;
    Ok(GradCheck {
        fragment: "bn+lambda+ce".into(),
        max_rel_error: acc.worst,
        coordinates: acc.n,
    })
}

fn time_mean(u: &Tensor<f64>, t: usize, b: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[b, c], |i| (0..t).map(|s| u.data()[s * b * c + i]).sum::<f64>() / t as f64)
}

/// Full-precision classifier head with cross-entropy: gradients on the
/// weight, bias and the `[T, B, N, D]` input stream.
pub fn check_head(seed: u64) -> Result<GradCheck> {
    let (t, b, n, d, c) = (2, 3, 4, 6, 5);
    let mut rng = Rng::new(seed);
    let mut head = Head::<f64>::new(d, c, &mut rng);
    head.weight = rng.normal_tensor(&[c, d], 0.5).cast();
    head.bias = rng.normal_tensor(&[c], 0.5).cast();
    let stream: Tensor<f64> = rng.normal_tensor(&[t, b, n, d], 1.0).cast();
    let targets: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();

    let (logits, cache) = head.forward(&stream)?;
    let (_, g) = batch_cross_entropy(&logits, &targets)?;
    let g_stream = head.backward(cache, &g)?;

    let loss = |h: &Head<f64>, s: &Tensor<f64>| -> Result<f64> {
        Ok(batch_cross_entropy(&h.forward(s)?.0, &targets)?.0)
    };
    let mut acc = Acc { worst: 0.0, n: 0 };
    let fd_w = finite_diff_grad(
        |w| {
            let mut h = head.clone();
            h.weight = w.clone();
            loss(&h, &stream)
        },
        &head.weight,
        H,
    )?;
    acc.add(head.grad_weight(), &fd_w)?;
    let fd_b = finite_diff_grad(
        |bv| {
            let mut h = head.clone();
            h.bias = bv.clone();
            loss(&h, &stream)
        },
        &head.bias,
        H,
    )?;
    acc.add(head.grad_bias(), &fd_b)?;
    acc.add(&g_stream, &finite_diff_grad(|s| loss(&head, s), &stream, H)?)?;
    Ok(GradCheck {
        fragment: "head+ce".into(),
        max_rel_error: acc.worst,
        coordinates: acc.n,
    })
}

/// Each surrogate's analytic derivative against central differences of its
/// relaxation on a grid over `[-3, 3]` (rectangular kinks excluded).
pub fn check_surrogates() -> Result<GradCheck> {
    let mut acc = Acc { worst: 0.0, n: 0 };
    for (kind, a) in [
        (SurrogateKind::Rectangular, 1.0),
        (SurrogateKind::Sigmoid, 4.0),
        (SurrogateKind::Arctan, 2.0),
    ] {
        let s = SurrogateSpec {
            kind,
            width_or_alpha: a,
        };
        let xs: Vec<f64> = (0..601)
            .map(|i| -3.0 + i as f64 * 0.01 + 0.001)
            .filter(|x| kind != SurrogateKind::Rectangular || (x.abs() - a / 2.0).abs() > 1e-3)
            .collect();
        let x = Tensor::new(&[xs.len()], xs)?;
        let analytic = x.map(|v| s.derivative(v));
        let numeric = x.map(|v| (s.relaxation(v + H) - s.relaxation(v - H)) / (2.0 * H));
        acc.add(&analytic, &numeric)?;
    }
    Ok(GradCheck {
        fragment: "surrogates".into(),
        max_rel_error: acc.worst,
        coordinates: acc.n,
    })
}

/// A head whose logits do not enter the loss: both gradients are zero.
pub fn check_unused_head(seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::new(seed);
    let used = Head::<f64>::new(4, 3, &mut rng);
    let mut unused = Head::<f64>::new(4, 3, &mut rng);
    let stream: Tensor<f64> = rng.normal_tensor(&[2, 2, 3, 4], 1.0).cast();
    let (logits, _) = used.forward(&stream)?;
    let (_, c2) = unused.forward(&stream)?;
    let (_, g) = batch_cross_entropy(&logits, &[0, 2])?;
    unused.backward(c2, &Tensor::zeros(g.shape()))?;
    let fd = finite_diff_grad(
        |w| {
            let mut h = unused.clone();
            h.weight = w.clone();
            let _ = h.forward(&stream)?;
            Ok(batch_cross_entropy(&used.forward(&stream)?.0, &[0, 2])?.0)
        },
        &unused.weight,
        H,
    )?;
    let mut acc = Acc { worst: 0.0, n: 0 };
    acc.add(unused.grad_weight(), &fd)?;
    Ok(GradCheck {
        fragment: "unused-head".into(),
        max_rel_error: acc.worst.max(unused.grad_weight().max_abs()).max(fd.max_abs()),
        coordinates: acc.n,
    })
}
