use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How colour (and, in stage 2, features) are read out of the ray tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Readout {
    /// Mean-pool the ray-transformer tokens and decode with an MLP.
    RayTransformer,
    /// Per-sample density and colour heads followed by alpha compositing.
    Volumetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// View/ray block pairs in the backbone.
    pub blocks: usize,
    /// View/ray block pairs in the feature head.
    pub stage2_blocks: usize,
    pub token_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub sources: usize,
    pub samples: usize,
    /// Channels of the learned source-image encoder.
    pub img_dim: usize,
    pub feat_dim: usize,
    pub pe_freqs: usize,
    /// Feed the relative direction encoding into every source token, making
    /// the backbone view-dependent. Only used for comparison runs.
    #[serde(default)]
    pub dir_in_source_tokens: bool,
    #[serde(default = "default_readout")]
    pub readout: Readout,
}

fn default_readout() -> Readout {
    Readout::RayTransformer
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("blocks", self.blocks),
            ("stage2_blocks", self.stage2_blocks),
            ("token_dim", self.token_dim),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("sources", self.sources),
            ("samples", self.samples),
            ("img_dim", self.img_dim),
            ("feat_dim", self.feat_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "token_dim {} is not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Width of the positional encoding of a sample position.
    pub fn pe_dim(&self) -> usize {
        3 + 6 * self.pe_freqs
    }

    /// Width of a raw source token before projection.
    pub fn source_in_dim(&self) -> usize {
        3 + self.img_dim + 1 + if self.dir_in_source_tokens { 4 } else { 0 }
    }

    /// Width of the per-ray direction summary seen by the colour head.
    pub fn dir_dim(&self) -> usize {
        4 * self.sources
    }
}

/// `[x, sin(2^k x), cos(2^k x)]` for `k < freqs`, per coordinate.
pub fn positional_encoding(x: [f64; 3], freqs: usize, out: &mut Vec<f64>) {
    out.extend_from_slice(&x);
    let mut f = 1.0;
    for _ in 0..freqs {
        for c in x {
            out.push((f * c).sin());
        }
        for c in x {
            out.push((f * c).cos());
        }
        f *= 2.0;
    }
}
