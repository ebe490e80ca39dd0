//! Training: losses, teacher targets, the optimizer and the epoch loop.

mod gradcheck;
mod loss;
mod optim;
mod teacher;
mod train;

pub use gradcheck::{check_bn_lambda_ce, check_head, check_surrogates, check_unused_head, normwise_rel_error, GradCheck};
pub use loss::{batch_cross_entropy, class_loss, cross_entropy, global_loss, GlobalLoss, LossReport};
pub use optim::{AdamW, CosineSchedule, OptimConfig, OptimState, StepStats};
pub use teacher::{argmax, teacher_predict, LogitsCache, Teacher, TeacherOutput, LOGITS_MAGIC, LOGITS_VERSION};
pub use train::{evaluate, fit, train_epoch, EpochMetrics};
