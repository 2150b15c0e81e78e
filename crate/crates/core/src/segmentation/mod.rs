//! Stroke-driven multi-view segmentation on feature images: stroke
//! rasterization, k-means over the stroked features, nearest-centre
//! thresholding in every view and mask scoring.

mod benchmark;
mod kmeans;
mod metrics;
mod nnfm;
mod strokes;

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

pub use benchmark::{run_benchmark, BenchmarkReport, BenchmarkSpec, InstanceResult, TAU_STEP};
pub use kmeans::{
    hartigan, inertia, kmeans, kmeans_plus_plus, lloyd, nearest, sq_dist, ClusterCenters, LloydRun,
    DEFAULT_K, DEFAULT_MAX_ITERS, RESTARTS,
};
pub use metrics::{average_precision, eval_masks, Confusion, EvalView, SegMetrics, ViewScore};
pub use nnfm::{nnfm_mask, nnfm_scores, threshold_scores, MaskImage, MAX_DISTANCE};
pub use strokes::{collect_stroke_features, Stroke, StrokeSet, STAMP_STEP};

use crate::error::{Error, Result};
use crate::features::FeatureImage;
use crate::model::{render_view, DirectionInput, Model, RenderRequest};
use crate::scene::{select_source_views, Scene};

/// Rays per forward pass when rendering features for segmentation.
pub const SEGMENT_CHUNK: usize = 256;

/// Where per-view feature images come from.
pub enum FeatureSource<'a> {
    /// Rendered by a stage-2 model from each view's nearest other views.
    Rendered { model: &'a Model, scene: &'a Scene },
    /// One precomputed image per scene view.
    Precomputed(&'a [FeatureImage]),
}

impl FeatureSource<'_> {
    pub fn view_count(&self) -> usize {
        match self {
            FeatureSource::Rendered { scene, .. } => scene.views.len(),
            FeatureSource::Precomputed(f) => f.len(),
        }
    }

    pub fn features(&self, view: usize) -> Result<FeatureImage> {
        if view >= self.view_count() {
            return Err(Error::NotFound(format!("view {view}")));
        }
        match self {
            FeatureSource::Rendered { model, scene } => render_features(model, scene, view),
            FeatureSource::Precomputed(f) => Ok(f[view].clone()),
        }
    }
}

/// Renders the feature image of scene view `view` without using that view's
/// own image.
pub fn render_features(model: &Model, scene: &Scene, view: usize) -> Result<FeatureImage> {
    let camera = scene
        .views
        .get(view)
        .ok_or_else(|| Error::NotFound(format!("view {view}")))?
        .camera
        .clone();
    let sources = select_source_views(scene, &camera, model.config.sources)?;
    let req = RenderRequest {
        camera,
        sources,
        features: true,
        chunk: SEGMENT_CHUNK,
        directions: DirectionInput::Computed,
    };
    Ok(render_view(model, scene, &req)?
        .feat
        .expect("features requested"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSegmentation {
    pub view_id: usize,
    pub mask: MaskImage,
    /// Per-pixel nearest-centre distance.
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub centers: ClusterCenters,
    pub threshold: f64,
    pub views: Vec<ViewSegmentation>,
}

/// Clusters the features under the strokes.
pub fn cluster_strokes(
    strokes: &StrokeSet,
    features: &BTreeMap<usize, FeatureImage>,
    k: usize,
    seed: u64,
) -> Result<ClusterCenters> {
    let points = collect_stroke_features(strokes, features)?;
    kmeans(&points, k, seed, DEFAULT_MAX_ITERS)
}

/// Thresholds every listed view against the same centres and `tau`.
pub fn masks_from_centers(
    centers: &ClusterCenters,
    features: &BTreeMap<usize, FeatureImage>,
    views: &[usize],
    tau: f64,
) -> Result<Vec<ViewSegmentation>> {
    views
        .iter()
        .map(|v| {
            let f = features
                .get(v)
                .ok_or_else(|| Error::NotFound(format!("no features for view {v}")))?;
            let scores = nnfm_scores(f, centers)?;
            let mask = threshold_scores(&scores, f.width, f.height, tau, Some(*v))?;
            Ok(ViewSegmentation {
                view_id: *v,
                mask,
                scores,
            })
        })
        .collect()
}

/// Collects stroke features, clusters them and masks every requested view.
pub fn segment_multiview(
    source: &FeatureSource<'_>,
    strokes: &StrokeSet,
    views: &[usize],
    k: usize,
    tau: f64,
    seed: u64,
) -> Result<Segmentation> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::domain(format!(
            "threshold must be non-negative, got {tau}"
        )));
    }
    let mut feats = BTreeMap::new();
    for v in strokes.views().into_iter().chain(views.iter().copied()) {
        if let std::collections::btree_map::Entry::Vacant(e) = feats.entry(v) {
            e.insert(source.features(v)?);
        }
    }
    let centers = cluster_strokes(strokes, &feats, k, seed)?;
    let views = masks_from_centers(&centers, &feats, views, tau)?;
    Ok(Segmentation {
        centers,
        threshold: tau,
        views,
    })
}

/// The threshold among the distinct scores that maximizes IoU against `gt`;
/// the smallest such value on ties.
pub fn tune_threshold(scores: &[f64], gt: &[bool]) -> f64 {
    let positives = gt.iter().filter(|g| **g).count();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let (mut best_iou, mut best_t) = (-1.0, 0.0);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if gt[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let union = positives + fp;
        let iou = if union == 0 {
            1.0
        } else {
            tp as f64 / union as f64
        };
        if iou > best_iou {
            best_iou = iou;
            best_t = s;
        }
    }
    best_t
}

/// A single stroke inside instance `id` in one view: the longest horizontal
/// run of well-interior pixels on the row that has the most of them.
pub fn instance_stroke(scene: &Scene, view: usize, id: u8, brush_radius: f64) -> Result<Stroke> {
    let masks = scene
        .instance_masks
        .as_ref()
        .ok_or_else(|| Error::domain(format!("scene {} has no instance masks", scene.id)))?;
    let m = masks
        .get(view)
        .ok_or_else(|| Error::NotFound(format!("view {view}")))?;
    let (w, h) = (m.width, m.height);
    let inside = m.mask_of(id);
    // Chessboard distance to the nearest outside pixel, by repeated erosion.
    let mut depth: Vec<u32> = inside.iter().map(|v| *v as u32).collect();
    let mut level = 1;
    loop {
        let prev = depth.clone();
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                if prev[y * w + x] != level {
                    continue;
                }
                let interior = x > 0
                    && y > 0
                    && x + 1 < w
                    && y + 1 < h
                    && (y - 1..=y + 1)
                        .all(|yy| (x - 1..=x + 1).all(|xx| prev[yy * w + xx] >= level));
                if interior {
                    depth[y * w + x] = level + 1;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
        level += 1;
    }
    let max = depth.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::domain(format!(
            "instance {id} is not visible in view {view}"
        )));
    }
    let floor = max.div_ceil(2);
    let mut best = (0usize, 0usize, 0usize);
    for y in 0..h {
        let mut x = 0;
        while x < w {
            if depth[y * w + x] < floor {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && depth[y * w + x] >= floor {
                x += 1;
            }
            if x - start > best.2 - best.1 || best.2 == 0 {
                best = (y, start, x);
            }
        }
    }
    let (y, x0, x1) = best;
    let mut points = vec![[x0 as f64, y as f64]];
    if x1 - 1 > x0 {
        points.push([(x1 - 1) as f64, y as f64]);
    }
    Ok(Stroke {
        view_id: view,
        points,
        brush_radius,
    })
}

pub fn encode_mask_png(mask: &MaskImage) -> Vec<u8> {
    let img = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.to_bytes())
        .expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn write_mask_png(mask: &MaskImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_mask_png(mask)).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit mask; values of 128 and above are selected.
pub fn read_mask_png(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw().into_iter().map(|v| v >= 128).collect()))
}

#[cfg(test)]
mod tests;
