use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural hyperparameters of the encoder/decoder pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub n_frames: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    /// Also let the reconstructed frame's own visible tokens act as cross-attention keys.
    pub cross_attend_current: bool,
    pub norm_eps: f64,
}

/// Decoder head count used when none is given: `dim / 64`, at least 1.
pub fn default_decoder_heads(dec_dim: usize) -> usize {
    (dec_dim / 64).max(1)
}

impl Default for ModelConfig {
    /// ViT-S/16 encoder (384 wide, 12 deep, 6 heads) on 224x224 frames, three
    /// frames, and a 192-wide, 2-deep decoder.
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            n_frames: 3,
            enc_dim: 384,
            enc_depth: 12,
            enc_heads: 6,
            dec_dim: 192,
            dec_depth: 2,
            dec_heads: default_decoder_heads(192),
            mlp_ratio: 4,
            cross_attend_current: false,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Default encoder with the 256-wide, 4-deep decoder.
    pub fn wide_decoder() -> Self {
        Self { dec_dim: 256, dec_depth: 4, dec_heads: default_decoder_heads(256), ..Self::default() }
    }

    /// 16x16 frames, patch 4, 16-d/2-block/2-head encoder, 8-d/1-block decoder.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            n_frames: 3,
            enc_dim: 16,
            enc_depth: 2,
            enc_heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 1,
            mlp_ratio: 4,
            cross_attend_current: false,
            norm_eps: 1e-6,
        }
    }

    /// 64x64 frames, patch 8, 96-d/4-block encoder, 48-d/2-block decoder.
    pub fn small() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            n_frames: 3,
            enc_dim: 96,
            enc_depth: 4,
            enc_heads: 3,
            dec_dim: 48,
            dec_depth: 2,
            dec_heads: 1,
            mlp_ratio: 4,
            cross_attend_current: false,
            norm_eps: 1e-6,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_frames < 2 {
            problems.push(format!("n_frames must be >= 2, got {}", self.n_frames));
        }
        for (name, dim, heads) in [("encoder", self.enc_dim, self.enc_heads), ("decoder", self.dec_dim, self.dec_heads)] {
            if heads == 0 || dim % heads != 0 {
                problems.push(format!("{name} width {dim} is not divisible by {heads} heads"));
            }
            if dim == 0 || dim % 4 != 0 {
                problems.push(format!("{name} width {dim} must be a positive multiple of 4"));
            }
        }
        if self.enc_depth == 0 {
            problems.push("encoder depth must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            problems.push("mlp_ratio must be >= 1".into());
        }
        if !(self.norm_eps > 0.0) {
            problems.push("norm_eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::default(), ModelConfig::wide_decoder(), ModelConfig::micro(), ModelConfig::small()] {
            c.validate().unwrap();
        }
        assert_eq!(ModelConfig::default().num_patches(), 196);
        assert_eq!(ModelConfig::default().dec_heads, 3);
    }

    #[test]
    fn all_problems_reported() {
        let c = ModelConfig { image_size: 63, enc_heads: 5, ..ModelConfig::micro() };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("image_size 63") && msg.contains("5 heads"), "{msg}");
    }
}
