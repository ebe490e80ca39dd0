use serde::Serialize;

use super::loss::{class_loss, global_loss};
use super::optim::{AdamW, CosineSchedule};
use super::teacher::{argmax, teacher_predict, Teacher};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::Rng;
use crate::probe::Ctx;

/// Means over one pass of the training data.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub ce_class: f64,
    pub ce_distill: f64,
    pub train_accuracy: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// One shuffled pass: forward, loss, backward, update.
///
/// With a teacher the objective is the global distillation loss; without
/// one it is cross-entropy on the classification head.
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    teacher: Option<&Teacher>,
    opt: &mut AdamW,
    schedule: &CosineSchedule,
    rng: &mut Rng,
    batch_size: usize,
    epoch: usize,
) -> Result<EpochMetrics> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let classes = model.config().num_classes;
    if data.num_classes() != classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model {classes}",
            data.num_classes()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let (mut loss, mut ce_c, mut ce_d, mut gn, mut lr) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut correct = 0usize;
    let mut batches = 0usize;
    for (bi, chunk) in order.chunks(batch_size).enumerate() {
        let batch = data.batch(chunk)?;
        let (out, cache) = model.forward(&batch.x, &mut Ctx::train())?;
        let g = match teacher {
            Some(t) => {
                let targets = teacher_predict(t, &batch, classes)?;
                global_loss(&out.logits, &batch.y, &out.dist_logits, &targets)?
            }
            None => class_loss(&out.logits, &batch.y)?,
        };
        if !g.report.global.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss in epoch {epoch}, batch {bi} (samples {:?})",
                batch.ids
            )));
        }
        for r in 0..out.logits.rows() {
            if argmax(out.logits.row(r)) == batch.y[r] {
                correct += 1;
            }
        }
        model.backward(cache, &g.grad_logits, &g.grad_dist)?;
        let step_lr = schedule.lr(opt.state.step);
        let stats = opt.step(model, step_lr).map_err(|e| {
            Error::Numeric(format!("epoch {epoch}, batch {bi}: {e}"))
        })?;
        loss += g.report.global;
        ce_c += g.report.ce_class;
        ce_d += g.report.ce_distill;
        gn += stats.grad_norm;
        lr = step_lr;
        batches += 1;
    }
    let n = batches as f64;
    Ok(EpochMetrics {
        epoch,
        loss: loss / n,
        ce_class: ce_c / n,
        ce_distill: ce_d / n,
        train_accuracy: correct as f64 / data.len() as f64,
        grad_norm: gn / n,
        lr,
    })
}

/// Top-1 accuracy of the classification head in inference mode.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch(chunk)?;
        let logits = model.predict(&b.x)?;
        for r in 0..logits.rows() {
            if argmax(logits.row(r)) == b.y[r] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains for `epochs` passes with a cosine schedule over all steps.
pub fn fit(
    model: &mut Model,
    data: &Dataset,
    teacher: Option<&Teacher>,
    opt: &mut AdamW,
    rng: &mut Rng,
    batch_size: usize,
    epochs: usize,
    mut on_epoch: impl FnMut(&Model, &EpochMetrics) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let per_epoch = data.len().div_ceil(batch_size.max(1)) as u64;
    let schedule = CosineSchedule::new(&opt.cfg, per_epoch * epochs as u64);
    let mut out = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let m = train_epoch(model, data, teacher, opt, &schedule, rng, batch_size, e)?;
        on_epoch(model, &m)?;
        out.push(m);
    }
    Ok(out)
}
