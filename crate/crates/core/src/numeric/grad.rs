use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central finite-difference gradient of a scalar function:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F: Scalar>(
    mut f: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    h: F,
) -> Result<Tensor<F>> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "finite_diff_grad: non-finite function value at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / two_h;
    }
    Ok(grad)
}

/// Largest elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_rel_error<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, floor: F) -> Result<F> {
    let d = a.zip_map(b, "max_rel_error", |x, y| {
        (x - y).abs() / x.abs().max(y.abs()).max(floor)
    })?;
    Ok(d.max_abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-4).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-5);
        assert!((g.data()[1] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(&[3], vec![0.5f64, -1.0, 9.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(7.0), &x, 1e-3).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        // analytic oracle: softmax(z) - onehot(target)
        let z = Tensor::new(&[3], vec![0.3f64, -1.2, 2.0]).unwrap();
        let target = 1;
        let ce = |t: &Tensor<f64>| {
            let m = t.data().iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + t.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            Ok(lse - t.data()[target])
        };
        let g = finite_diff_grad(ce, &z, 1e-5).unwrap();
        let m = 2.0f64;
        let denom: f64 = z.data().iter().map(|v| (v - m).exp()).sum();
        for (i, &gi) in g.data().iter().enumerate() {
            let p = (z.data()[i] - m).exp() / denom;
            let expect = p - if i == target { 1.0 } else { 0.0 };
            assert!((gi - expect).abs() < 1e-5, "coord {i}: {gi} vs {expect}");
        }
    }

    #[test]
    fn non_finite_value_names_coordinate() {
        let x = Tensor::new(&[2], vec![0.0f64, 1.0]).unwrap();
        let err = finite_diff_grad(
            |t| Ok(if t.data()[1] > 1.0 { f64::NAN } else { 0.0 }),
            &x,
            1e-3,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"));
    }
}
