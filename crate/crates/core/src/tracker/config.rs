use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model shape and training recipe. Every field has a default; unknown keys
/// are rejected when deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub search_size: usize,
    pub template_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub n_pyramid_levels: usize,
    /// Channels each pyramid level contributes to the illumination map.
    pub illum_width: usize,
    /// Channels of the coarse and deformable viewpoint maps.
    pub view_hidden: usize,
    pub view_width: usize,
    pub head_hidden: usize,
    /// Use one MLP for both similarity and difference encodings.
    pub share_pfi_mlp: bool,
    /// Search region side as a multiple of `sqrt(w * h)` of the target.
    pub search_factor: f64,
    pub template_factor: f64,

    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Fraction of `steps` after which the rate is multiplied by `lr_decay`.
    pub decay_at: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    /// Train prompt and head parameters only.
    pub freeze_backbone: bool,
    /// Maximum search-center shift, as a fraction of the search side.
    pub center_jitter: f64,
    /// Maximum log-scale change of the search side.
    pub scale_jitter: f64,
    pub seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            search_size: 128,
            template_size: 64,
            patch_size: 16,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            ffn_ratio: 4,
            n_pyramid_levels: 3,
            illum_width: 8,
            view_hidden: 4,
            view_width: 8,
            head_hidden: 32,
            share_pfi_mlp: false,
            search_factor: 4.0,
            template_factor: 2.0,
            lr: 4e-4,
            steps: 1200,
            batch_size: 4,
            decay_at: 0.8,
            lr_decay: 0.1,
            weight_decay: 1e-4,
            freeze_backbone: false,
            center_jitter: 0.2,
            scale_jitter: 0.2,
            seed: 0,
        }
    }
}

impl TrackerConfig {
    /// Tiny model used for full-model gradient checks.
    pub fn micro() -> Self {
        Self {
            search_size: 32,
            template_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            ffn_ratio: 2,
            n_pyramid_levels: 2,
            illum_width: 2,
            view_hidden: 2,
            view_width: 2,
            head_hidden: 4,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> usize {
        self.search_size / self.patch_size
    }

    pub fn template_grid(&self) -> usize {
        self.template_size / self.patch_size
    }

    pub fn search_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn template_tokens(&self) -> usize {
        self.template_grid() * self.template_grid()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.search_size % self.patch_size != 0 || self.template_size % self.patch_size != 0 {
            return bad(format!(
                "search {} and template {} must be multiples of patch size {}",
                self.search_size, self.template_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.n_pyramid_levels == 0 || self.patch_size % (1 << (self.n_pyramid_levels - 1)) != 0 {
            return bad(format!(
                "patch size {} must be divisible by 2^(levels-1) for {} levels",
                self.patch_size, self.n_pyramid_levels
            ));
        }
        let div = 1 << self.n_pyramid_levels;
        if self.template_size % div != 0 || self.search_size % div != 0 {
            return bad(format!("region sizes must be divisible by {div}"));
        }
        if self.depth == 0 || self.embed_dim == 0 || self.ffn_ratio == 0 {
            return bad("depth, embed_dim and ffn_ratio must be positive".into());
        }
        if [self.illum_width, self.view_hidden, self.view_width, self.head_hidden].contains(&0) {
            return bad("prompter and head widths must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a finite non-negative number, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2 for batch norm, got {}", self.batch_size));
        }
        if !(0.0..=1.0).contains(&self.decay_at) {
            return bad(format!("decay_at must lie in [0, 1], got {}", self.decay_at));
        }
        if !(self.search_factor > 0.0 && self.template_factor > 0.0) {
            return bad("crop factors must be positive".into());
        }
        if !(0.0..0.5).contains(&self.center_jitter) || self.scale_jitter < 0.0 {
            return bad("center_jitter must lie in [0, 0.5) and scale_jitter be >= 0".into());
        }
        Ok(())
    }
}
