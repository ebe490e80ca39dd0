use serde::Serialize;

use super::teacher::TeacherOutput;
use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

/// `-log softmax(logits)[target]`, computed with max subtraction.
pub fn cross_entropy<F: Scalar>(logits: &[F], target: usize) -> Result<F> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            bound: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("cross_entropy: non-finite logits".into()));
    }
    let m = logits.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
    let lse = logits.iter().fold(F::zero(), |a, &v| a + (v - m).exp()).ln() + m;
    Ok(lse - logits[target])
}

/// Mean cross-entropy over the rows of `[B, C]` logits and its gradient
/// `(softmax - onehot) / B`.
pub fn batch_cross_entropy<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> Result<(F, Tensor<F>)> {
    let [b, c] = logits.dims2("batch_cross_entropy")?;
    if targets.len() != b {
        return Err(Error::dim("batch_cross_entropy", logits.shape(), &[targets.len(), c]));
    }
    let inv_b = F::one() / F::from_usize(b).unwrap();
    let mut total = F::zero();
    let mut grad = Tensor::zeros(logits.shape());
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        total = total + cross_entropy(row, t)?;
        let m = row.iter().fold(F::neg_infinity(), |a, &v| a.max(v));
        let z = row.iter().fold(F::zero(), |a, &v| a + (v - m).exp());
        for k in 0..c {
            let p = (row[k] - m).exp() / z;
            let onehot = if k == t { F::one() } else { F::zero() };
            grad.data_mut()[r * c + k] = (p - onehot) * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}

/// Batch-mean loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub ce_class: f64,
    pub ce_distill: f64,
    pub global: f64,
}

/// Output of [`global_loss`]: the report and the gradients of `global` on
/// the classification and distillation logits.
pub struct GlobalLoss<F: Scalar> {
    pub report: LossReport,
    pub grad_logits: Tensor<F>,
    pub grad_dist: Tensor<F>,
}

/// `(CE(y_hat, y) + CE(y_d_hat, y_T)) / 2`, where `y_T` is the teacher's
/// hard label.
pub fn global_loss<F: Scalar>(
    y_hat: &Tensor<F>,
    y: &[usize],
    y_d_hat: &Tensor<F>,
    teacher: &[TeacherOutput],
) -> Result<GlobalLoss<F>> {
    if y_hat.shape() != y_d_hat.shape() {
        return Err(Error::dim("global_loss", y_hat.shape(), y_d_hat.shape()));
    }
    let y_t: Vec<usize> = teacher.iter().map(|t| t.hard_label).collect();
    let (ce_c, g_c) = batch_cross_entropy(y_hat, y)?;
    let (ce_d, g_d) = batch_cross_entropy(y_d_hat, &y_t)?;
    let half = F::lit(0.5);
    let (ce_class, ce_distill) = (ce_c.to_f64().unwrap(), ce_d.to_f64().unwrap());
    Ok(GlobalLoss {
        report: LossReport {
            ce_class,
            ce_distill,
            global: (ce_class + ce_distill) / 2.0,
        },
        grad_logits: g_c.scale(half),
        grad_dist: g_d.scale(half),
    })
}

/// Classification loss alone, for training without a teacher. The
/// distillation gradient is zero and `global == ce_class`.
pub fn class_loss<F: Scalar>(y_hat: &Tensor<F>, y: &[usize]) -> Result<GlobalLoss<F>> {
    let (ce, g) = batch_cross_entropy(y_hat, y)?;
    let ce = ce.to_f64().unwrap();
    Ok(GlobalLoss {
        report: LossReport {
            ce_class: ce,
            ce_distill: 0.0,
            global: ce,
        },
        grad_dist: Tensor::zeros(g.shape()),
        grad_logits: g,
    })
}
