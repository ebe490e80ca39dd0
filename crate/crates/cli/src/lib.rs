//! Command implementations behind the `bestformer` binary.

pub mod commands;
pub mod config;

pub use commands::{bench, eval, inspect, pack_teacher_logits, train, Overrides};
pub use config::{MetricsConfig, RunConfig, TeacherSource};
