use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters. The first seven fields are the ablation
/// axes of the cost/performance tables; the rest describe the input and the
/// encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_latents: usize,
    pub latent_dim: usize,
    pub cross_heads: usize,
    pub self_heads: usize,
    pub cross_head_dim: usize,
    pub self_head_dim: usize,
    /// Number of latent self-attention blocks after the cross-attention block.
    pub self_per_cross: usize,
    pub num_freq_bands: usize,
    pub max_freq: f64,
    pub input_channels: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub ff_mult: usize,
    pub attn_dropout: f64,
    pub ff_dropout: f64,
}

impl Default for ModelConfig {
    /// The final compact configuration: 16 latents of width 128, one head of
    /// width 64 in both attentions, one self-attention block.
    fn default() -> Self {
        Self {
            num_latents: 16,
            latent_dim: 128,
            cross_heads: 1,
            self_heads: 1,
            cross_head_dim: 64,
            self_head_dim: 64,
            self_per_cross: 1,
            num_freq_bands: 12,
            max_freq: 128.0,
            input_channels: 14,
            seq_len: 1280,
            num_classes: 2,
            ff_mult: 4,
            attn_dropout: 0.1,
            ff_dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// The tiny configuration used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            num_latents: 2,
            latent_dim: 8,
            cross_heads: 1,
            self_heads: 2,
            cross_head_dim: 4,
            self_head_dim: 4,
            self_per_cross: 1,
            num_freq_bands: 2,
            max_freq: 8.0,
            input_channels: 3,
            seq_len: 16,
            num_classes: 2,
            ff_mult: 4,
            attn_dropout: 0.1,
            ff_dropout: 0.1,
        }
    }

    /// Token width `C + 2K + 1`.
    pub fn token_dim(&self) -> usize {
        self.input_channels + 2 * self.num_freq_bands + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_latents", self.num_latents),
            ("latent_dim", self.latent_dim),
            ("cross_heads", self.cross_heads),
            ("self_heads", self.self_heads),
            ("cross_head_dim", self.cross_head_dim),
            ("self_head_dim", self.self_head_dim),
            ("self_per_cross", self.self_per_cross),
            ("num_freq_bands", self.num_freq_bands),
            ("input_channels", self.input_channels),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if !(self.max_freq >= 2.0) {
            return Err(Error::Config(format!("`max_freq` = {} must be >= 2", self.max_freq)));
        }
        for (name, v) in [("attn_dropout", self.attn_dropout), ("ff_dropout", self.ff_dropout)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("`{name}` = {v} outside [0,1)")));
            }
        }
        Ok(())
    }
}

/// The seven table axes, applied on top of a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub num_latents: usize,
    pub latent_dim: usize,
    pub cross_heads: usize,
    pub self_heads: usize,
    pub cross_head_dim: usize,
    pub self_head_dim: usize,
    pub self_per_cross: usize,
}

impl Ablation {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            num_latents: self.num_latents,
            latent_dim: self.latent_dim,
            cross_heads: self.cross_heads,
            self_heads: self.self_heads,
            cross_head_dim: self.cross_head_dim,
            self_head_dim: self.self_head_dim,
            self_per_cross: self.self_per_cross,
            ..base.clone()
        }
    }

    pub fn of(cfg: &ModelConfig) -> Self {
        Self {
            num_latents: cfg.num_latents,
            latent_dim: cfg.latent_dim,
            cross_heads: cfg.cross_heads,
            self_heads: cfg.self_heads,
            cross_head_dim: cfg.cross_head_dim,
            self_head_dim: cfg.self_head_dim,
            self_per_cross: cfg.self_per_cross,
        }
    }
}

const fn row(m: usize, d: usize, ch: usize, sh: usize, chd: usize, shd: usize, blocks: usize) -> Ablation {
    Ablation {
        num_latents: m,
        latent_dim: d,
        cross_heads: ch,
        self_heads: sh,
        cross_head_dim: chd,
        self_head_dim: shd,
        self_per_cross: blocks,
    }
}

/// Self-attention depth, 8 down to 1.
pub const TABLE1: [Ablation; 5] = [
    row(32, 128, 1, 8, 64, 64, 8),
    row(32, 128, 1, 8, 64, 64, 6),
    row(32, 128, 1, 8, 64, 64, 4),
    row(32, 128, 1, 8, 64, 64, 2),
    row(32, 128, 1, 8, 64, 64, 1),
];

/// Self-attention heads, 6 down to 1, single block.
pub const TABLE2: [Ablation; 4] = [
    row(32, 128, 1, 6, 64, 64, 1),
    row(32, 128, 1, 4, 64, 64, 1),
    row(32, 128, 1, 2, 64, 64, 1),
    row(32, 128, 1, 1, 64, 64, 1),
];

/// Number and width of latents.
pub const TABLE3: [Ablation; 3] = [
    row(32, 64, 1, 1, 64, 64, 1),
    row(16, 128, 1, 1, 64, 64, 1),
    row(16, 64, 1, 1, 64, 64, 1),
];

/// Cross/self head widths.
pub const TABLE4: [Ablation; 3] = [
    row(16, 128, 1, 1, 64, 32, 1),
    row(16, 128, 1, 1, 32, 64, 1),
    row(16, 128, 1, 1, 32, 32, 1),
];

/// Named preset row-blocks: `table1` … `table4`, or `all` for the fifteen
/// distinct configurations.
pub fn preset(name: &str) -> Option<Vec<Ablation>> {
    match name {
        "table1" => Some(TABLE1.to_vec()),
        "table2" => Some(TABLE2.to_vec()),
        "table3" => Some(TABLE3.to_vec()),
        "table4" => Some(TABLE4.to_vec()),
        "all" => Some([&TABLE1[..], &TABLE2, &TABLE3, &TABLE4].concat()),
        _ => None,
    }
}

pub const PRESET_NAMES: [&str; 5] = ["table1", "table2", "table3", "table4", "all"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().token_dim(), 14 + 25);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = ModelConfig {
            latent_dim: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(m)) if m.contains("latent_dim")));
        let bad = ModelConfig {
            attn_dropout: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            max_freq: 1.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn all_preset_has_fifteen_distinct_rows() {
        let all = preset("all").unwrap();
        assert_eq!(all.len(), 15);
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
        assert!(preset("table9").is_none());
    }
}
