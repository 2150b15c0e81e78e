use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    cluster_strokes, eval_masks, instance_stroke, masks_from_centers, EvalView, FeatureSource,
    SegMetrics, StrokeSet,
};
use crate::error::{Error, Result};
use crate::features::FeatureImage;
use crate::scene::Scene;

/// Candidate thresholds are multiples of this step up to the maximum distance.
pub const TAU_STEP: f64 = 1e-3;

/// Fixed settings of the stroke benchmark on one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    /// The view every stroke is drawn on; the threshold is tuned here too.
    pub stroke_view: usize,
    pub brush_radius: f64,
    pub k: usize,
    pub seed: u64,
    /// Smallest visible area, in pixels, for an instance to be queried.
    pub min_pixels: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            stroke_view: 0,
            brush_radius: 1.0,
            k: super::DEFAULT_K,
            seed: 0,
            min_pixels: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub instance: u8,
    pub strokes: StrokeSet,
    /// Scored on every view except the stroked one.
    pub metrics: SegMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub scene: String,
    pub spec: BenchmarkSpec,
    /// One threshold for the whole scene.
    pub threshold: f64,
    pub instances: Vec<InstanceResult>,
    pub mean_iou: f64,
    pub accuracy: f64,
    pub map: f64,
}

fn iou_at(scores: &[f64], gt: &[bool], tau: f64) -> f64 {
    let (mut tp, mut union) = (0usize, 0usize);
    for (s, g) in scores.iter().zip(gt) {
        let p = *s <= tau;
        tp += (p && *g) as usize;
        union += (p || *g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    }
}

/// One single-stroke query per sufficiently visible instance, all sharing a
/// threshold picked to maximize mean IoU on the stroked view. Reported
/// metrics cover the remaining views only.
pub fn run_benchmark(
    source: &FeatureSource<'_>,
    scene: &Scene,
    spec: &BenchmarkSpec,
) -> Result<BenchmarkReport> {
    let masks = scene
        .instance_masks
        .as_ref()
        .ok_or_else(|| Error::domain(format!("scene {} has no instance masks", scene.id)))?;
    let n = scene.views.len();
    if spec.stroke_view >= n {
        return Err(Error::NotFound(format!("view {}", spec.stroke_view)));
    }
    let views: Vec<usize> = (0..n).collect();
    let mut feats: BTreeMap<usize, FeatureImage> = BTreeMap::new();
    for v in &views {
        feats.insert(*v, source.features(*v)?);
    }
    let mut queries = Vec::new();
    for id in 1..=scene.instance_count() {
        let area = masks[spec.stroke_view]
            .data
            .iter()
            .filter(|v| **v == id)
            .count();
        if area < spec.min_pixels {
            continue;
        }
        let strokes = StrokeSet {
            strokes: vec![instance_stroke(
                scene,
                spec.stroke_view,
                id,
                spec.brush_radius,
            )?],
        };
        let centers = cluster_strokes(&strokes, &feats, spec.k, spec.seed)?;
        let segs = masks_from_centers(&centers, &feats, &views, 0.0)?;
        queries.push((id, strokes, segs));
    }
    if queries.is_empty() {
        return Err(Error::domain(format!(
            "no instance covers {} pixels in view {}",
            spec.min_pixels, spec.stroke_view
        )));
    }
    let steps = (super::MAX_DISTANCE / TAU_STEP).round() as usize;
    let (mut best_tau, mut best) = (0.0, -1.0);
    for i in 0..=steps {
        let tau = i as f64 * TAU_STEP;
        let mean = queries
            .iter()
            .map(|(id, _, segs)| {
                iou_at(
                    &segs[spec.stroke_view].scores,
                    &masks[spec.stroke_view].mask_of(*id),
                    tau,
                )
            })
            .sum::<f64>()
            / queries.len() as f64;
        if mean > best {
            best = mean;
            best_tau = tau;
        }
    }
    let mut instances = Vec::new();
    for (id, strokes, segs) in queries {
        let gts: Vec<Vec<bool>> = views.iter().map(|v| masks[*v].mask_of(id)).collect();
        let preds: Vec<Vec<bool>> = segs
            .iter()
            .map(|s| s.scores.iter().map(|x| *x <= best_tau).collect())
            .collect();
        let eval: Vec<EvalView<'_>> = views
            .iter()
            .filter(|v| **v != spec.stroke_view)
            .map(|v| EvalView {
                view_id: *v,
                pred: &preds[*v],
                gt: &gts[*v],
                scores: Some(&segs[*v].scores),
            })
            .collect();
        instances.push(InstanceResult {
            instance: id,
            strokes,
            metrics: eval_masks(&eval)?,
        });
    }
    let k = instances.len() as f64;
    Ok(BenchmarkReport {
        scene: scene.id.clone(),
        spec: spec.clone(),
        threshold: best_tau,
        mean_iou: instances.iter().map(|r| r.metrics.mean_iou).sum::<f64>() / k,
        accuracy: instances.iter().map(|r| r.metrics.accuracy).sum::<f64>() / k,
        map: instances.iter().map(|r| r.metrics.map).sum::<f64>() / k,
        instances,
    })
}
