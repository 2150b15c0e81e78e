use super::network::{Depths, DirectionInput, Model, RayBatch, SourceSet};
use crate::error::{Error, Result};
use crate::features::{FeatureImage, Provenance};
use crate::geometry::{generate_ray, Camera};
use crate::scene::Scene;

#[derive(Clone, Debug)]
pub struct RenderRequest {
    pub camera: Camera,
    /// Scene view indices used as sources.
    pub sources: Vec<usize>,
    pub features: bool,
    /// Rays per forward pass.
    pub chunk: usize,
    pub directions: DirectionInput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    /// Row-major `H*W*3`, unquantized.
    pub rgb: Vec<f64>,
    pub feat: Option<FeatureImage>,
    pub degenerate_rays: usize,
}

/// Renders every pixel of `req.camera` with deterministic depth placement.
pub fn render_view(model: &Model, scene: &Scene, req: &RenderRequest) -> Result<Rendered> {
    if req.features && !model.has_feature_head() {
        return Err(Error::Capability(
            "feature rendering needs a stage-2 checkpoint".into(),
        ));
    }
    let cam = &req.camera;
    let (w, h) = (cam.width, cam.height);
    let sources = SourceSet::from_scene(scene, &req.sources)?;
    let mut rgb = Vec::with_capacity(w * h * 3);
    let d = model.config.feat_dim;
    let mut feat = Vec::with_capacity(if req.features { w * h * d } else { 0 });
    let mut degenerate = 0;
    let pixels: Vec<[f64; 2]> = (0..h)
        .flat_map(|y| (0..w).map(move |x| [x as f64, y as f64]))
        .collect();
    for chunk in pixels.chunks(req.chunk.max(1)) {
        let rays = chunk
            .iter()
            .map(|p| generate_ray(cam, *p))
            .collect::<Result<Vec<_>>>()?;
        let mut batch = RayBatch::build(
            &model.config,
            &sources,
            &rays,
            scene.near,
            scene.far,
            Depths::Uniform,
        )?;
        batch.override_directions(req.directions);
        let pred = model.predict(&sources, &batch, req.features)?;
        rgb.extend_from_slice(pred.rgb.data());
        if let Some(f) = pred.feat {
            feat.extend_from_slice(f.data());
        }
        degenerate += pred
            .diagnostics
            .degenerate_rays
            .iter()
            .filter(|v| **v)
            .count();
    }
    let feat = if req.features {
        Some(FeatureImage::new(h, w, d, feat, Provenance::Student)?)
    } else {
        None
    };
    Ok(Rendered {
        width: w,
        height: h,
        rgb,
        feat,
        degenerate_rays: degenerate,
    })
}
