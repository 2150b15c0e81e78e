//! Posed multi-view scenes: the in-memory model, synthetic generation and the
//! on-disk directory format.

mod io;
mod synth;

pub use io::{load_scene, read_scene_file, save_scene, CameraEntry, SceneFile, ViewEntry};
pub use synth::{instance_embeddings, make_scene, make_teacher_features, ObjectKind, SceneSpec};

use crate::error::{Error, Result};
use crate::features::{apply_pca, fit_pca_images, normalize, FeatureImage, PcaModel, Provenance};
use crate::geometry::Camera;

/// RGB image with values quantized to multiples of 1/255 so that PNG storage
/// is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn pixel(&self, i: usize) -> [f64; 3] {
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| quantize(*v)).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        Self::new(
            width,
            height,
            bytes.iter().map(|b| *b as f64 / 255.0).collect(),
        )
    }

    pub fn mean_colour(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        let n = (self.width * self.height) as f64;
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c] / n;
            }
        }
        m
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Instance id per pixel; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelImage {
    pub fn mask_of(&self, id: u8) -> Vec<bool> {
        self.data.iter().map(|v| *v == id).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedImage {
    pub camera: Camera,
    pub rgb: RgbImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub views: Vec<PosedImage>,
    pub near: f64,
    pub far: f64,
    pub instance_masks: Option<Vec<LabelImage>>,
    pub teacher_features: Option<Vec<FeatureImage>>,
    /// Per-scene reduction applied to the native teacher features.
    pub pca: Option<PcaModel>,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.views.first().map_or(0, |v| v.camera.width)
    }

    pub fn height(&self) -> usize {
        self.views.first().map_or(0, |v| v.camera.height)
    }

    pub fn instance_count(&self) -> u8 {
        self.instance_masks
            .as_ref()
            .map(|ms| {
                ms.iter()
                    .flat_map(|m| m.data.iter().copied())
                    .max()
                    .unwrap_or(0)
            })
            .unwrap_or(0)
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.teacher_features
            .as_ref()
            .and_then(|f| f.first().map(|f| f.dim))
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.width(), self.height());
        for (i, v) in self.views.iter().enumerate() {
            v.camera.validate()?;
            if v.camera.width != w || v.camera.height != h {
                return Err(Error::domain(format!(
                    "view {i} has a different image size"
                )));
            }
            if v.rgb.width != w || v.rgb.height != h {
                return Err(Error::domain(format!(
                    "view {i} image does not match its camera"
                )));
            }
        }
        if let Some(ms) = &self.instance_masks {
            if ms.len() != self.views.len() || ms.iter().any(|m| m.width != w || m.height != h) {
                return Err(Error::domain("instance masks do not match the views"));
            }
        }
        if let Some(fs) = &self.teacher_features {
            if fs.len() != self.views.len() || fs.iter().any(|f| f.width != w || f.height != h) {
                return Err(Error::domain("teacher features do not match the views"));
            }
        }
        Ok(())
    }
}

/// Replaces native teacher features with their per-scene PCA reduction to
/// `d_out` channels, L2-normalized per pixel, and records the fitted model.
/// Values are rounded to `f32` so they survive `.feat` storage exactly.
pub fn reduce_teacher_features(scene: &Scene, d_out: usize) -> Result<Scene> {
    let feats = scene
        .teacher_features
        .as_ref()
        .ok_or_else(|| Error::domain(format!("scene {} has no teacher features", scene.id)))?;
    let refs: Vec<&FeatureImage> = feats.iter().collect();
    let pca = fit_pca_images(&refs, d_out)?;
    let mut reduced = Vec::with_capacity(feats.len());
    for f in feats {
        let (mut r, _) = normalize(&apply_pca(&pca, f)?);
        for v in r.data.iter_mut() {
            *v = *v as f32 as f64;
        }
        r.provenance = Provenance::PcaReduced;
        reduced.push(r);
    }
    Ok(Scene {
        teacher_features: Some(reduced),
        pca: Some(pca),
        ..scene.clone()
    })
}

/// The `count` views whose camera centres are closest to the target's,
/// skipping any view with exactly the target's pose. Ties go to the lower
/// index.
pub fn select_source_views(scene: &Scene, target: &Camera, count: usize) -> Result<Vec<usize>> {
    let centre = target.centre();
    let mut candidates: Vec<(f64, usize)> = scene
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.camera.same_pose(target))
        .map(|(i, v)| ((v.camera.centre() - centre).norm(), i))
        .collect();
    if candidates.len() < count {
        return Err(Error::domain(format!(
            "scene {} has {} candidate source views, {count} requested",
            scene.id,
            candidates.len()
        )));
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(candidates.into_iter().take(count).map(|(_, i)| i).collect())
}
