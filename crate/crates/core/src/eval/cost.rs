//! Analytic parameter, FLOP and training-memory accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{count_params, count_side_params, MsaBlock, ModelConfig, SideConfig, SideRole, TokenHead};

pub const PRESETS: [&str; 4] = ["vit-tiny", "vit-small", "vit-base", "vit-large"];

/// Dimension tables of the standard vision transformers at 224² input with 16² patches.
pub fn preset(name: &str, num_classes: usize) -> Result<ModelConfig> {
    let (hidden, depth, heads) = match name {
        "vit-tiny" => (192, 12, 3),
        "vit-small" => (384, 12, 6),
        "vit-base" => (768, 12, 12),
        "vit-large" => (1024, 24, 16),
        other => return Err(Error::config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
    };
    Ok(ModelConfig {
        depth,
        hidden,
        heads,
        mlp_ratio: 4.0,
        num_tokens: 196,
        token_input_dim: 16 * 16 * 3,
        num_classes,
        positional: true,
    })
}

/// Floating-point operation counts (multiply-accumulate = 2) by kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    /// Dense layers, including bias adds.
    pub linear: f64,
    /// `QKᵀ` products.
    pub scores: f64,
    /// Attention-weighted value sums.
    pub values: f64,
    /// Norms, softmax, activations and residual adds.
    pub elementwise: f64,
}

impl FlopCount {
    pub fn total(&self) -> f64 {
        self.linear + self.scores + self.values + self.elementwise
    }

    pub fn giga(&self) -> f64 {
        self.total() / 1e9
    }
}

impl std::ops::Add for FlopCount {
    type Output = FlopCount;

    fn add(self, o: FlopCount) -> FlopCount {
        FlopCount {
            linear: self.linear + o.linear,
            scores: self.scores + o.scores,
            values: self.values + o.values,
            elementwise: self.elementwise + o.elementwise,
        }
    }
}

impl std::ops::Mul<f64> for FlopCount {
    type Output = FlopCount;

    fn mul(self, k: f64) -> FlopCount {
        FlopCount { linear: self.linear * k, scores: self.scores * k, values: self.values * k, elementwise: self.elementwise * k }
    }
}

const NORM_OPS: f64 = 5.0;
const GELU_OPS: f64 = 8.0;
const SOFTMAX_OPS: f64 = 3.0;

fn linear(rows: usize, fan_in: usize, fan_out: usize) -> FlopCount {
    FlopCount { linear: (2 * rows * fan_in * fan_out + rows * fan_out) as f64, ..Default::default() }
}

fn elementwise(n: f64) -> FlopCount {
    FlopCount { elementwise: n, ..Default::default() }
}

/// One pre-norm transformer block over `seq` tokens.
pub fn block_flops(width: usize, heads: usize, mlp_hidden: usize, seq: usize) -> FlopCount {
    let (s, w) = (seq as f64, width as f64);
    let attn = FlopCount {
        scores: 2.0 * s * s * w,
        values: 2.0 * s * s * w,
        elementwise: SOFTMAX_OPS * heads as f64 * s * s,
        ..Default::default()
    };
    elementwise(2.0 * NORM_OPS * s * w + 2.0 * s * w + GELU_OPS * s * mlp_hidden as f64)
        + linear(seq, width, 3 * width)
        + attn
        + linear(seq, width, width)
        + linear(seq, width, mlp_hidden)
        + linear(seq, mlp_hidden, width)
}

/// Forward pass of the classifier on one sample.
pub fn classifier_flops(cfg: &ModelConfig) -> FlopCount {
    let (d, h, s) = (cfg.num_tokens, cfg.hidden, cfg.seq_len());
    let pos = if cfg.positional { (s * h) as f64 } else { 0.0 };
    linear(d, cfg.token_input_dim, h)
        + elementwise(pos)
        + block_flops(h, cfg.heads, cfg.mlp_hidden(), s) * cfg.depth as f64
        + elementwise(NORM_OPS * h as f64)
        + linear(1, h, cfg.num_classes)
}

fn token_head_flops(rows: usize, width: usize, depth: usize, classes: usize) -> FlopCount {
    let mut f = elementwise(NORM_OPS * (rows * width) as f64);
    for _ in 0..depth {
        f = f + linear(rows, width, width) + elementwise(GELU_OPS * (rows * width) as f64);
    }
    f + linear(rows, width, classes)
}

/// A side branch on top of an already computed backbone pass.
pub fn side_flops(cfg: &ModelConfig, side: &SideConfig) -> FlopCount {
    let (d, s, w) = (cfg.num_tokens, cfg.seq_len(), side.width(cfg));
    let per_block = linear(s, cfg.hidden, w) + elementwise((s * w) as f64) + block_flops(w, side.heads(cfg), side.mlp_hidden(cfg), s);
    let trunk = per_block * cfg.depth as f64;
    match side.role {
        SideRole::Surrogate => trunk + elementwise(NORM_OPS * w as f64) + linear(1, w, cfg.num_classes),
        SideRole::Explainer => {
            trunk + elementwise(NORM_OPS * (s * w) as f64) + token_head_flops(d, w, side.head_depth, cfg.num_classes)
        }
    }
}

/// One pass yielding both prediction and explanation: backbone plus explainer branch.
pub fn combined_flops(cfg: &ModelConfig, side: &SideConfig) -> FlopCount {
    classifier_flops(cfg) + side_flops(cfg, &SideConfig { role: SideRole::Explainer, ..side.clone() })
}

/// Extra full-width attention blocks in a standalone explainer.
pub const SEPARATE_EXTRA_BLOCKS: usize = 3;

/// Classifier plus a standalone full-width explainer (backbone, extra blocks, token head).
pub fn separate_flops(cfg: &ModelConfig, head_depth: usize) -> FlopCount {
    let (h, s) = (cfg.hidden, cfg.seq_len());
    let explainer = classifier_flops(cfg)
        + block_flops(h, cfg.heads, cfg.mlp_hidden(), s) * SEPARATE_EXTRA_BLOCKS as f64
        + token_head_flops(cfg.num_tokens, h, head_depth, cfg.num_classes);
    classifier_flops(cfg) + explainer
}

/// Parameters of the classifier plus a standalone full-width explainer.
pub fn separate_params(cfg: &ModelConfig, head_depth: usize) -> usize {
    let h = cfg.hidden;
    2 * count_params(cfg)
        + SEPARATE_EXTRA_BLOCKS * MsaBlock::count(h, cfg.mlp_hidden())
        + TokenHead::count(h, head_depth, cfg.num_classes)
}

fn block_activations(width: usize, heads: usize, mlp_hidden: usize, seq: usize) -> usize {
    // ln, qkv, probs, attended, proj, residual, ln, fc1, gelu, fc2, residual
    let (s, w) = (seq, width);
    s * w + 3 * s * w + heads * s * s + s * w + s * w + s * w + s * w + 2 * s * mlp_hidden + s * w + s * w
}

/// Scalars produced by a forward pass at batch 1.
pub fn activation_count(cfg: &ModelConfig, side: Option<&SideConfig>) -> usize {
    let (d, h, s) = (cfg.num_tokens, cfg.hidden, cfg.seq_len());
    let mut n = d * h + 2 * s * h + cfg.depth * block_activations(h, cfg.heads, cfg.mlp_hidden(), s) + h + cfg.num_classes;
    if let Some(side) = side {
        let w = side.width(cfg);
        n += cfg.depth * (2 * s * w + block_activations(w, side.heads(cfg), side.mlp_hidden(cfg), s));
        n += match side.role {
            SideRole::Surrogate => w + cfg.num_classes,
            SideRole::Explainer => s * w + d * w * (2 + 2 * side.head_depth) + d * cfg.num_classes,
        };
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub total_params: usize,
    pub trainable_params: usize,
    pub forward_flops: f64,
    /// Parameters, gradients, two optimizer moments and activations at batch 1, in bytes.
    pub memory_bytes: usize,
}

impl EfficiencyReport {
    /// Training a side branch on a frozen backbone, or the whole classifier when `side` is `None`.
    pub fn for_training(cfg: &ModelConfig, side: Option<&SideConfig>) -> Self {
        let backbone = count_params(cfg);
        let (total, trainable, flops) = match side {
            Some(sc) => {
                let t = count_side_params(cfg, sc);
                (backbone + t, t, (classifier_flops(cfg) + side_flops(cfg, sc)).total())
            }
            None => (backbone, backbone, classifier_flops(cfg).total()),
        };
        let memory_bytes = 4 * (total + 3 * trainable + activation_count(cfg, side));
        EfficiencyReport { total_params: total, trainable_params: trainable, forward_flops: flops, memory_bytes }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        for p in PRESETS {
            preset(p, 10).unwrap().validate().unwrap();
        }
        assert!(preset("vit-huge", 10).is_err());
    }

    #[test]
    fn sequence_scaling() {
        let a = block_flops(64, 4, 256, 50);
        let b = block_flops(64, 4, 256, 100);
        assert!((b.scores / a.scores - 4.0).abs() < 1e-12);
        let mlp = |s| (linear(s, 64, 256) + linear(s, 256, 64)).linear;
        assert!((mlp(100) / mlp(50) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_counts_are_consistent() {
        let cfg = preset("vit-tiny", 10).unwrap();
        let side = SideConfig::new(8, SideRole::Surrogate);
        let r = EfficiencyReport::for_training(&cfg, Some(&side));
        assert!(r.trainable_params < r.total_params);
        let full = EfficiencyReport::for_training(&cfg, None);
        assert!(r.memory_bytes < full.memory_bytes);
    }
}
