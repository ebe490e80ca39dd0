use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::param::{Module, ParamKind, Visitor};

/// Adaptive-moment optimizer settings with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    /// Final learning rate as a fraction of `lr`.
    #[serde(default)]
    pub min_lr_ratio: f64,
    #[serde(default)]
    pub warmup_steps: u64,
    /// Lower bound enforced on attention scales after each step.
    #[serde(default = "d_floor")]
    pub lambda_floor: f64,
}

fn d_lr() -> f64 {
    1e-3
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.01
}
fn d_clip() -> f64 {
    5.0
}
fn d_floor() -> f64 {
    1e-3
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_wd(),
            clip_norm: d_clip(),
            min_lr_ratio: 0.0,
            warmup_steps: 0,
            lambda_floor: d_floor(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str| Err(Error::Config(format!("optimizer.{f} is out of range")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2");
        }
        if !(self.eps > 0.0) {
            return bad("eps");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm");
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return bad("min_lr_ratio");
        }
        if !(self.lambda_floor > 0.0) {
            return bad("lambda_floor");
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay from `lr` to `lr * min_lr_ratio`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub min: f64,
    pub warmup: u64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn new(cfg: &OptimConfig, total_steps: u64) -> Self {
        Self {
            base: cfg.lr,
            min: cfg.lr * cfg.min_lr_ratio,
            warmup: cfg.warmup_steps,
            total: total_steps.max(1),
        }
    }

    /// Learning rate for 0-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.base - self.min) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Moment accumulators, one slot per parameter tensor in visiting order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: OptimConfig,
    pub state: OptimState,
}

/// Gradient statistics of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub lr: f64,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: OptimState::default(),
        })
    }

    /// Applies the accumulated gradients with learning rate `lr`, clears them
    /// and projects attention scales back above the floor.
    pub fn step(&mut self, model: &mut Model, lr: f64) -> Result<StepStats> {
        struct Norm(f64, Option<String>);
        impl Visitor for Norm {
            fn param(&mut self, name: &str, _: &[usize], _: &mut [f32], g: &mut [f32], _: ParamKind) {
                let s: f64 = g.iter().map(|&x| (x as f64) * (x as f64)).sum();
                if !s.is_finite() && self.1.is_none() {
                    self.1 = Some(name.to_string());
                }
                self.0 += s;
            }
            fn buffer(&mut self, _: &str, _: &mut [f32]) {}
        }
        let mut norm = Norm(0.0, None);
        model.visit("", &mut norm);
        if let Some(name) = norm.1 {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
        let grad_norm = norm.0.sqrt();
        let scale = if self.cfg.clip_norm > 0.0 && grad_norm > self.cfg.clip_norm {
            self.cfg.clip_norm / grad_norm
        } else {
            1.0
        };

        self.state.step += 1;
        let t = self.state.step as i32;
        struct Update<'a> {
            cfg: &'a OptimConfig,
            st: &'a mut OptimState,
            slot: usize,
            lr: f64,
            scale: f64,
            bc1: f64,
            bc2: f64,
        }
        impl Visitor for Update<'_> {
            fn param(&mut self, _: &str, _: &[usize], p: &mut [f32], g: &mut [f32], kind: ParamKind) {
                if self.st.m.len() <= self.slot {
                    self.st.m.push(vec![0.0; p.len()]);
                    self.st.v.push(vec![0.0; p.len()]);
                }
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let decay = if kind == ParamKind::Weight {
                    self.cfg.weight_decay
                } else {
                    0.0
                };
                let m = &mut self.st.m[self.slot];
                let v = &mut self.st.v[self.slot];
                for i in 0..p.len() {
                    let gi = g[i] as f64 * self.scale;
                    let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
                    let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let upd = (mi / self.bc1) / ((vi / self.bc2).sqrt() + self.cfg.eps);
                    let pi = p[i] as f64;
                    p[i] = (pi - self.lr * (upd + decay * pi)) as f32;
                    g[i] = 0.0;
                }
                self.slot += 1;
            }
            fn buffer(&mut self, _: &str, _: &mut [f32]) {}
        }
        let mut up = Update {
            cfg: &self.cfg,
            st: &mut self.state,
            slot: 0,
            lr,
            scale,
            bc1: 1.0 - self.cfg.beta1.powi(t),
            bc2: 1.0 - self.cfg.beta2.powi(t),
        };
        model.visit("", &mut up);
        model.project_lambda(self.cfg.lambda_floor as f32);
        Ok(StepStats { grad_norm, lr })
    }
}
