//! Weight binarization by standardization and sign, with its
//! straight-through backward.

use serde::{Deserialize, Serialize};

use super::packed::{Alphabet, PackedBits};
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

/// Granularity of the mean/σ used before taking signs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeMode {
    /// One mean and σ for the whole weight tensor.
    #[default]
    PerTensor,
    /// One mean and σ per output row.
    PerChannel,
}

/// Mean and population σ of each standardization group.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mode: StandardizeMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn groups<F: Scalar>(w: &Tensor<F>, mode: StandardizeMode) -> (usize, usize) {
    match mode {
        StandardizeMode::PerTensor => (1, w.len()),
        StandardizeMode::PerChannel => (w.rows(), w.last_dim()),
    }
}

/// `(w - mean) / σ` per group.
pub fn standardize<F: Scalar>(
    w: &Tensor<F>,
    mode: StandardizeMode,
) -> Result<(Tensor<F>, Standardization)> {
    let (n_groups, size) = groups(w, mode);
    let n = size as f64;
    let mut out = w.clone();
    let mut rec = Standardization {
        mode,
        mean: Vec::with_capacity(n_groups),
        std: Vec::with_capacity(n_groups),
    };
    // statistics accumulate in f64 regardless of the element type
    for g in 0..n_groups {
        let chunk = &w.data()[g * size..(g + 1) * size];
        let mean = chunk.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n;
        let var = chunk
            .iter()
            .map(|v| (v.to_f64().unwrap() - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::DegenerateWeights);
        }
        for (o, &v) in out.data_mut()[g * size..(g + 1) * size].iter_mut().zip(chunk) {
            *o = F::lit((v.to_f64().unwrap() - mean) / std);
        }
        rec.mean.push(mean);
        rec.std.push(std);
    }
    Ok((out, rec))
}

/// Signs of the standardized weights as a `{-1,+1}` tensor (`0 -> +1`).
pub fn binary_signs<F: Scalar>(w: &Tensor<F>, mode: StandardizeMode) -> Result<Tensor<F>> {
    let (z, _) = standardize(w, mode)?;
    Ok(z.map(|v| if v >= F::zero() { F::one() } else { -F::one() }))
}

/// Standardize then take signs, packed with `+1 -> bit 1`.
pub fn binarize_weights<F: Scalar>(
    w: &Tensor<F>,
    mode: StandardizeMode,
) -> Result<(PackedBits, Standardization)> {
    let (z, rec) = standardize(w, mode)?;
    let signs = z.map(|v| if v >= F::zero() { F::one() } else { -F::one() });
    Ok((PackedBits::pack(&signs, Alphabet::Signs)?, rec))
}

/// Gradient on the latent weights given the gradient on their binary image.
///
/// The sign is passed straight through where the standardized latent lies in
/// `[-clip, clip]` and blocked elsewhere (clipped elements get exactly zero).
/// The mean and σ of the standardization are differentiated exactly:
/// `dW = (gz - mean(gz) - z * mean(gz * z)) / σ` per group.
pub fn ste_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    latent: &Tensor<F>,
    clip: F,
    mode: StandardizeMode,
) -> Result<Tensor<F>> {
    if grad_out.shape() != latent.shape() {
        return Err(Error::dim("ste_backward", grad_out.shape(), latent.shape()));
    }
    let (z, rec) = standardize(latent, mode)?;
    let (n_groups, size) = groups(latent, mode);
    let n = F::from_usize(size).unwrap();
    let mut out = Tensor::zeros(latent.shape());
    for g in 0..n_groups {
        let r = g * size..(g + 1) * size;
        let zc = &z.data()[r.clone()];
        let gz: Vec<F> = grad_out.data()[r.clone()]
            .iter()
            .zip(zc)
            .map(|(&gv, &zv)| if zv.abs() <= clip { gv } else { F::zero() })
            .collect();
        let mean_g = gz.iter().fold(F::zero(), |a, &v| a + v) / n;
        let mean_gz = gz.iter().zip(zc).fold(F::zero(), |a, (&gv, &zv)| a + gv * zv) / n;
        let sigma = F::lit(rec.std[g]);
        for ((o, &gv), &zv) in out.data_mut()[r].iter_mut().zip(&gz).zip(zc) {
            *o = if zv.abs() <= clip {
                (gv - mean_g - zv * mean_gz) / sigma
            } else {
                F::zero()
            };
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, Rng};
    use proptest::prelude::*;

    #[test]
    fn small_pattern() {
        let w = Tensor::new(&[1, 3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let (b, rec) = binarize_weights(&w, StandardizeMode::PerTensor).unwrap();
        assert_eq!(b.unpack(Alphabet::Signs).data(), &[-1.0, 1.0, 1.0]);
        assert_eq!(rec.mean, vec![2.0]);
    }

    #[test]
    fn constant_weights_are_degenerate() {
        let w = Tensor::full(&[2, 2], 0.7f32);
        assert!(matches!(
            binarize_weights(&w, StandardizeMode::PerTensor),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn symmetric_tensors_are_balanced() {
        // enumerate sign-symmetric multisets {c ± d_i}
        for n in 1..=6usize {
            let mut vals = Vec::new();
            for i in 0..n {
                let d = 0.5 + i as f64 * 0.75;
                vals.push(3.0 + d);
                vals.push(3.0 - d);
            }
            let w = Tensor::new(&[1, vals.len()], vals).unwrap();
            let (b, _) = binarize_weights(&w, StandardizeMode::PerTensor).unwrap();
            assert_eq!(b.count_ones() * 2, b.cols());
        }
    }

    #[test]
    fn ste_inside_clip_is_standardization_jacobian() {
        let mut rng = Rng::new(11);
        for mode in [StandardizeMode::PerTensor, StandardizeMode::PerChannel] {
            let w: Tensor<f64> = rng.normal_tensor(&[3, 5], 1.0).cast();
            let g: Tensor<f64> = rng.normal_tensor(&[3, 5], 1.0).cast();
            let analytic = ste_backward(&g, &w, 1e9, mode).unwrap();
            let fd = finite_diff_grad(|x| Ok(standardize(x, mode)?.0.mul(&g)?.sum()), &w, 1e-6)
                .unwrap();
            assert!(analytic.max_abs_diff(&fd).unwrap() < 1e-7, "{mode:?}");
        }
    }

    #[test]
    fn ste_blocks_outside_clip_and_zero_grad() {
        // one far outlier: its standardized value exceeds the clip
        let mut vals = vec![0.0f64; 99];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.1 } else { -0.1 };
        }
        vals.push(100.0);
        let w = Tensor::new(&[1, 100], vals).unwrap();
        let (z, _) = standardize(&w, StandardizeMode::PerTensor).unwrap();
        assert!(z.data()[99] > 9.0);
        let mut g = Tensor::zeros(&[1, 100]);
        g.data_mut()[99] = 1.0;
        let d = ste_backward(&g, &w, 1.0, StandardizeMode::PerTensor).unwrap();
        assert!(d.max_abs() == 0.0);
        let g = Tensor::full(&[1, 100], 1.0);
        let d = ste_backward(&g, &w, 1.0, StandardizeMode::PerTensor).unwrap();
        assert_eq!(d.data()[99], 0.0);

        let zero = Tensor::zeros(&[1, 100]);
        let d = ste_backward(&zero, &w, 1.0, StandardizeMode::PerTensor).unwrap();
        assert!(d.max_abs() == 0.0);
    }

    proptest! {
        #[test]
        fn standardized_mean_is_zero(seed in any::<u64>(), n in 2usize..300) {
            let w = Rng::new(seed).normal_tensor(&[1, n], 2.0);
            let (z, _) = standardize(&w, StandardizeMode::PerTensor).unwrap();
            let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() <= 1e-6);
        }
    }
}
