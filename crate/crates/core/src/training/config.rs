use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub rays_per_iter: usize,
    /// Stage-2 batch size; `None` keeps `rays_per_iter`.
    #[serde(default)]
    pub stage2_rays_per_iter: Option<usize>,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    /// Stage-2 backbone learning rate as a fraction of `stage2_lr`.
    pub backbone_lr_factor: f64,
    pub lambda_rgb: f64,
    pub lambda_feat: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stratified depth jitter while training; evaluation is always uniform.
    pub stratified: bool,
    /// Random rigid motion of the whole scene and a random colour-channel
    /// permutation per batch, so positions and hues cannot be memorized.
    #[serde(default)]
    pub augment: bool,
}

impl TrainConfig {
    pub fn stage2_rays(&self) -> usize {
        self.stage2_rays_per_iter.unwrap_or(self.rays_per_iter)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rays_per_iter == 0 || self.stage2_rays_per_iter == Some(0) {
            return Err(Error::config("rays per iteration must be at least 1"));
        }
        for (name, v) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "{name} must be a non-negative number"
                )));
            }
        }
        for (name, v) in [
            ("backbone_lr_factor", self.backbone_lr_factor),
            ("lambda_rgb", self.lambda_rgb),
            ("lambda_feat", self.lambda_feat),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// A named model + training bundle for one scale of experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub image_width: usize,
    pub image_height: usize,
}

impl Profile {
    /// Laptop-CPU scale: 64×48 images, short runs.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            model: ModelConfig {
                blocks: 2,
                stage2_blocks: 1,
                token_dim: 32,
                heads: 4,
                mlp_hidden: 64,
                sources: 4,
                samples: 32,
                img_dim: 16,
                feat_dim: 64,
                pe_freqs: 4,
                dir_in_source_tokens: false,
                readout: crate::model::Readout::RayTransformer,
            },
            train: TrainConfig {
                rays_per_iter: 64,
                stage2_rays_per_iter: Some(128),
                stage1_iters: 2000,
                stage2_iters: 500,
                stage1_lr: 5e-4,
                stage2_lr: 1e-3,
                backbone_lr_factor: 0.1,
                lambda_rgb: 0.1,
                lambda_feat: 1.0,
                adam: AdamConfig::default(),
                seed: 0,
                stratified: true,
                augment: true,
            },
            image_width: 64,
            image_height: 48,
        }
    }

    /// Full-scale settings; far too slow for a CPU but kept for reference.
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            model: ModelConfig {
                blocks: 4,
                stage2_blocks: 1,
                token_dim: 64,
                heads: 4,
                mlp_hidden: 256,
                sources: 10,
                samples: 192,
                img_dim: 32,
                feat_dim: 64,
                pe_freqs: 10,
                dir_in_source_tokens: false,
                readout: crate::model::Readout::RayTransformer,
            },
            train: TrainConfig {
                rays_per_iter: 512,
                stage2_rays_per_iter: None,
                stage1_iters: 200_000,
                stage2_iters: 5_000,
                stage1_lr: 5e-4,
                stage2_lr: 1e-3,
                backbone_lr_factor: 0.1,
                lambda_rgb: 0.1,
                lambda_feat: 1.0,
                adam: AdamConfig::default(),
                seed: 0,
                stratified: true,
                augment: true,
            },
            image_width: 1008,
            image_height: 756,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::config(format!("unknown profile {other:?}"))),
        }
    }
}
