use serde::{Deserialize, Serialize};

use super::kmeans::ClusterCenters;
use crate::error::{Error, Result};
use crate::features::{normalized, FeatureImage};

/// Largest distance between two unit vectors.
pub const MAX_DISTANCE: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
    pub threshold: f64,
    pub view_id: Option<usize>,
}

impl MaskImage {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// `0` and `255` bytes, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| if *v { 255 } else { 0 }).collect()
    }
}

/// Per-pixel distance from the L2-normalized feature to the nearest
/// L2-normalized centre.
pub fn nnfm_scores(f: &FeatureImage, centers: &ClusterCenters) -> Result<Vec<f64>> {
    if centers.k() == 0 {
        return Err(Error::domain("no cluster centres"));
    }
    if centers.dim() != f.dim {
        return Err(Error::domain(format!(
            "centres have {} channels, features have {}",
            centers.dim(),
            f.dim
        )));
    }
    let units: Vec<Vec<f64>> = centers.centers.iter().map(|c| normalized(c).0).collect();
    Ok((0..f.pixels())
        .map(|i| {
            let (v, _) = normalized(f.pixel(i));
            units
                .iter()
                .map(|c| {
                    c.iter()
                        .zip(&v)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect())
}

pub fn threshold_scores(
    scores: &[f64],
    width: usize,
    height: usize,
    tau: f64,
    view_id: Option<usize>,
) -> Result<MaskImage> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::domain(format!(
            "threshold must be non-negative, got {tau}"
        )));
    }
    Ok(MaskImage {
        width,
        height,
        data: scores.iter().map(|s| *s <= tau).collect(),
        threshold: tau,
        view_id,
    })
}

/// Selects pixels whose normalized feature lies within `tau` of a normalized
/// centre.
pub fn nnfm_mask(f: &FeatureImage, centers: &ClusterCenters, tau: f64) -> Result<MaskImage> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::domain(format!(
            "threshold must be non-negative, got {tau}"
        )));
    }
    let s = nnfm_scores(f, centers)?;
    threshold_scores(&s, f.width, f.height, tau, None)
}
