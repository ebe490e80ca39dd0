use crate::error::{Error, Result};
use crate::neuron::SpikeTrain;
use crate::numeric::{Scalar, Tensor};

/// Per-timestep positive scale applied to binarized attention.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaScale {
    pub values: Vec<f32>,
}

impl LambdaScale {
    /// Identity scale for `t` timesteps.
    pub fn ones(t: usize) -> Self {
        Self {
            values: vec![1.0; t],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.values.iter().position(|&v| !(v > 0.0)) {
            None => Ok(()),
            Some(t) => Err(Error::Config(format!(
                "lambda must be positive, got {} at timestep {t}",
                self.values[t]
            ))),
        }
    }

    /// Clamp every entry to at least `floor`.
    pub fn project(&mut self, floor: f32) {
        self.values.iter_mut().for_each(|v| *v = v.max(floor));
    }
}

/// Multiplies each timestep slice of `spikes` by its scale.
pub fn apply_lambda<F: Scalar>(spikes: &SpikeTrain<F>, lam: &[F]) -> Result<Tensor<F>> {
    let t = spikes.timesteps();
    if lam.len() != t {
        return Err(Error::dim("apply_lambda", spikes.as_tensor().shape(), &[lam.len()]));
    }
    if let Some(i) = lam.iter().position(|&v| !(v > F::zero())) {
        return Err(Error::Config(format!("lambda must be positive at timestep {i}")));
    }
    let s = spikes.as_tensor();
    let inner = s.len() / t;
    Ok(Tensor::from_fn(s.shape(), |i| s.data()[i] * lam[i / inner]))
}

/// Backward of [`apply_lambda`]: `(d spikes, d lambda)`.
pub fn apply_lambda_backward<F: Scalar>(
    spikes: &Tensor<F>,
    lam: &[F],
    grad: &Tensor<F>,
) -> Result<(Tensor<F>, Vec<F>)> {
    if spikes.shape() != grad.shape() {
        return Err(Error::dim("apply_lambda_backward", spikes.shape(), grad.shape()));
    }
    let t = lam.len();
    let inner = spikes.len() / t;
    let mut g_lam = vec![F::zero(); t];
    let g_s = Tensor::from_fn(grad.shape(), |i| grad.data()[i] * lam[i / inner]);
    for (i, (&g, &s)) in grad.data().iter().zip(spikes.data()).enumerate() {
        g_lam[i / inner] = g_lam[i / inner] + g * s;
    }
    Ok((g_s, g_lam))
}
