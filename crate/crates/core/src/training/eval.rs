use crate::error::{Error, Result};
use crate::features::cosine;
use crate::model::{render_view, DirectionInput, Model, RenderRequest};
use crate::scene::{select_source_views, Scene};

/// Rays per forward pass when rendering whole images.
pub const RENDER_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub psnr: f64,
    /// PSNR of predicting the image's own mean colour everywhere.
    pub baseline_psnr: f64,
    /// Mean over pixels of the squared feature residual norm.
    pub feat_mse: Option<f64>,
    /// The same for predicting the view's mean teacher feature everywhere.
    pub feat_baseline_mse: Option<f64>,
    pub median_cosine: Option<f64>,
}

pub fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Renders scene view `view` from its nearest other views and scores it.
pub fn evaluate_view(
    model: &Model,
    scene: &Scene,
    view: usize,
    with_features: bool,
) -> Result<ViewMetrics> {
    let target = scene
        .views
        .get(view)
        .ok_or_else(|| Error::domain(format!("scene {} has no view {view}", scene.id)))?;
    let sources = select_source_views(scene, &target.camera, model.config.sources)?;
    let req = RenderRequest {
        camera: target.camera.clone(),
        sources,
        features: with_features,
        chunk: RENDER_CHUNK,
        directions: DirectionInput::Computed,
    };
    let r = render_view(model, scene, &req)?;
    let gt = &target.rgb.data;
    let n = gt.len() as f64;
    let mse = r
        .rgb
        .iter()
        .zip(gt)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    let mean = target.rgb.mean_colour();
    let base = gt
        .chunks_exact(3)
        .map(|p| (0..3).map(|c| (p[c] - mean[c]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let (mut feat_mse, mut feat_base, mut med) = (None, None, None);
    if let (Some(pred), true) = (&r.feat, with_features) {
        let teacher = scene
            .teacher_features
            .as_ref()
            .ok_or_else(|| Error::config("scene has no teacher features to score against"))?;
        let t = &teacher[view];
        let px = t.pixels();
        let d = t.dim;
        let mut mean_f = vec![0.0; d];
        for i in 0..px {
            for (m, v) in mean_f.iter_mut().zip(t.pixel(i)) {
                *m += v / px as f64;
            }
        }
        let mut err = 0.0;
        let mut berr = 0.0;
        let mut cos = Vec::with_capacity(px);
        for i in 0..px {
            let (a, b) = (pred.pixel(i), t.pixel(i));
            err += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            berr += mean_f
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
            cos.push(cosine(a, b));
        }
        feat_mse = Some(err / px as f64);
        feat_base = Some(berr / px as f64);
        med = Some(median(cos));
    }
    Ok(ViewMetrics {
        psnr: psnr(mse),
        baseline_psnr: psnr(base),
        feat_mse,
        feat_baseline_mse: feat_base,
        median_cosine: med,
    })
}
