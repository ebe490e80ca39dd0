use serde::{Deserialize, Serialize};

use crate::binary::{StandardizeMode, WeightMode};
use crate::error::{Error, Result};
use crate::neuron::{LifParams, Reset, SurrogateSpec};

/// How encoder blocks are wired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Two-stream coupling with an exact inverse.
    #[default]
    Reversible,
    /// Single stream with additive shortcuts.
    Residual,
}

/// How the spike-count attention map is turned into weights on V.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Soft-reset LIF over time, scaled by a learnable per-timestep lambda.
    #[default]
    Binary,
    /// Integer map times a fixed scale (full-precision counterpart).
    Real,
}

/// Which reversible stream feeds the classification head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamTap {
    #[default]
    X0,
    X1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStage {
    pub out_channels: usize,
    /// 2x2 max-pool with stride 2 after normalization.
    pub pool: bool,
}

/// Patch-splitting stem.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StemSpec {
    /// Images `[B, C, H, W]` through LIF -> binary 3x3 conv -> BN stages.
    Conv {
        in_channels: usize,
        height: usize,
        width: usize,
        stages: Vec<ConvStage>,
    },
    /// Flat vectors `[B, tokens * patch_dim]` split into tokens and embedded
    /// through LIF -> binary linear -> BN.
    Linear { tokens: usize, patch_dim: usize },
}

impl StemSpec {
    /// Four stages widening to `embed_dim` (D/8, D/4, D/2, D), pooling after
    /// the last `pooled` stages.
    pub fn conv(in_channels: usize, height: usize, width: usize, embed_dim: usize, pooled: usize) -> Self {
        let widths = [embed_dim / 8, embed_dim / 4, embed_dim / 2, embed_dim];
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvStage {
                out_channels: c,
                pool: i >= 4 - pooled.min(4),
            })
            .collect();
        StemSpec::Conv {
            in_channels,
            height,
            width,
            stages,
        }
    }

    pub fn tokens(&self) -> usize {
        match self {
            StemSpec::Conv {
                height,
                width,
                stages,
                ..
            } => {
                let pools = stages.iter().filter(|s| s.pool).count() as u32;
                (height >> pools) * (width >> pools)
            }
            StemSpec::Linear { tokens, .. } => *tokens,
        }
    }

    /// Shape of one input sample.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            StemSpec::Conv {
                in_channels,
                height,
                width,
                ..
            } => vec![*in_channels, *height, *width],
            StemSpec::Linear { tokens, patch_dim } => vec![tokens * patch_dim],
        }
    }
}

/// Trainable scalar counts of a configured model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    /// Stem and encoder projection weights.
    pub projection_weights: usize,
    /// Bits per projection weight at inference.
    pub projection_bits: u32,
    /// Normalization scale and shift terms.
    pub norm: usize,
    pub lambda: usize,
    pub head: usize,
    /// Training-only distillation head.
    pub dist_head: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.projection_weights + self.norm + self.lambda + self.head + self.dist_head
    }

    /// Parameters kept at 32 bits in a deployed model (no distillation head).
    pub fn inference_full_precision(&self) -> usize {
        self.norm + self.lambda + self.head
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub timesteps: usize,
    pub tau: f64,
    pub v_threshold: f64,
    pub hidden_ratio: f64,
    pub num_classes: usize,
    pub stem: StemSpec,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    #[serde(default)]
    pub encoder: EncoderKind,
    #[serde(default)]
    pub weights: WeightMode,
    #[serde(default)]
    pub attention: AttentionMode,
    /// Multiplier on the integer attention map in `Real` mode.
    #[serde(default = "default_attn_scale")]
    pub attn_scale: f64,
    #[serde(default)]
    pub classify_on: StreamTap,
    #[serde(default)]
    pub standardize: StandardizeMode,
    #[serde(default = "default_clip")]
    pub ste_clip: f64,
    #[serde(default = "default_true")]
    pub detach_reset: bool,
}

fn default_attn_scale() -> f64 {
    0.125
}

fn default_clip() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Bestformer-L-D for 32x32 RGB images (two pooled stem stages, 64 tokens).
    pub fn bestformer_cifar(depth: usize, embed_dim: usize, timesteps: usize, num_classes: usize) -> Self {
        Self::base(depth, embed_dim, timesteps, num_classes, StemSpec::conv(3, 32, 32, embed_dim, 2))
    }

    /// Bestformer-L-D for 224x224 RGB images (four pooled stem stages, 196 tokens).
    pub fn bestformer_imagenet(depth: usize, embed_dim: usize, timesteps: usize) -> Self {
        Self::base(depth, embed_dim, timesteps, 1000, StemSpec::conv(3, 224, 224, embed_dim, 4))
    }

    /// Small model over flat vectors.
    pub fn vector(
        depth: usize,
        embed_dim: usize,
        timesteps: usize,
        num_classes: usize,
        tokens: usize,
        patch_dim: usize,
    ) -> Self {
        let mut cfg = Self::base(
            depth,
            embed_dim,
            timesteps,
            num_classes,
            StemSpec::Linear { tokens, patch_dim },
        );
        cfg.heads = if embed_dim % 2 == 0 { 2 } else { 1 };
        cfg
    }

    fn base(depth: usize, embed_dim: usize, timesteps: usize, num_classes: usize, stem: StemSpec) -> Self {
        Self {
            depth,
            embed_dim,
            heads: if embed_dim % 8 == 0 { 8 } else { 1 },
            timesteps,
            tau: 0.5,
            v_threshold: 1.0,
            hidden_ratio: 4.0,
            num_classes,
            stem,
            surrogate: SurrogateSpec::default(),
            encoder: EncoderKind::Reversible,
            weights: WeightMode::Binary,
            attention: AttentionMode::Binary,
            attn_scale: default_attn_scale(),
            classify_on: StreamTap::X0,
            standardize: StandardizeMode::PerTensor,
            ste_clip: 1.0,
            detach_reset: true,
        }
    }

    /// The full-precision, non-reversible counterpart of this model.
    pub fn full_precision_counterpart(&self) -> Self {
        Self {
            encoder: EncoderKind::Residual,
            weights: WeightMode::Full,
            attention: AttentionMode::Real,
            ..self.clone()
        }
    }

    pub fn hidden_dim(&self) -> usize {
        (self.hidden_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.stem.tokens()
    }

    pub fn neuron(&self, reset: Reset) -> LifParams {
        LifParams {
            tau: self.tau,
            v_threshold: self.v_threshold,
            reset,
            surrogate: self.surrogate,
            detach_reset: self.detach_reset,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.depth < 1 {
            return err("depth must be at least 1".into());
        }
        if self.timesteps < 1 {
            return err("timesteps must be at least 1".into());
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return err(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.num_classes < 2 {
            return err("num_classes must be at least 2".into());
        }
        if !(self.hidden_ratio > 0.0) || self.hidden_dim() == 0 {
            return err(format!("hidden_ratio {} gives an empty hidden layer", self.hidden_ratio));
        }
        if !(self.ste_clip > 0.0) {
            return err("ste_clip must be positive".into());
        }
        if !(self.attn_scale > 0.0) {
            return err("attn_scale must be positive".into());
        }
        self.neuron(Reset::Hard).validate()?;
        match &self.stem {
            StemSpec::Conv {
                in_channels,
                height,
                width,
                stages,
            } => {
                if *in_channels == 0 || stages.is_empty() {
                    return err("conv stem needs input channels and at least one stage".into());
                }
                if stages.last().unwrap().out_channels != self.embed_dim {
                    return err(format!(
                        "last stem stage must produce embed_dim {} channels",
                        self.embed_dim
                    ));
                }
                if stages.iter().any(|s| s.out_channels == 0) {
                    return err("stem stage with zero channels".into());
                }
                let (mut h, mut w) = (*height, *width);
                for (i, s) in stages.iter().enumerate() {
                    if s.pool {
                        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
                            return err(format!(
                                "stem stage {i}: spatial extent {h}x{w} is not divisible by the pooling stride 2"
                            ));
                        }
                        h /= 2;
                        w /= 2;
                    }
                }
                if h == 0 || w == 0 {
                    return err("stem leaves no tokens".into());
                }
            }
            StemSpec::Linear { tokens, patch_dim } => {
                if *tokens == 0 || *patch_dim == 0 {
                    return err("linear stem needs positive tokens and patch_dim".into());
                }
            }
        }
        Ok(())
    }

    /// Closed-form parameter counts by group.
    pub fn param_breakdown(&self) -> ParamBreakdown {
        let d = self.embed_dim;
        let hd = self.hidden_dim();
        let mut pw = 0;
        let mut bn = 0;
        let input_bn = match &self.stem {
            StemSpec::Conv {
                in_channels,
                stages,
                ..
            } => {
                let mut cin = *in_channels;
                for s in stages {
                    pw += 9 * cin * s.out_channels;
                    bn += 2 * s.out_channels;
                    cin = s.out_channels;
                }
                2 * in_channels
            }
            StemSpec::Linear { tokens, patch_dim } => {
                pw += patch_dim * d;
                bn += 2 * d;
                2 * tokens * patch_dim
            }
        };
        pw += self.depth * (4 * d * d + 2 * d * hd);
        bn += self.depth * (4 * 2 * d + 2 * hd + 2 * d);
        let lambda = match self.attention {
            AttentionMode::Binary => self.depth * self.timesteps,
            AttentionMode::Real => 0,
        };
        let head = self.num_classes * d + self.num_classes;
        ParamBreakdown {
            projection_weights: pw,
            projection_bits: self.weights.bits(),
            norm: bn + input_bn,
            lambda,
            head,
            dist_head: head,
        }
    }

    /// `Bestformer-L-D` label.
    pub fn label(&self) -> String {
        format!("Bestformer-{}-{}", self.depth, self.embed_dim)
    }
}
