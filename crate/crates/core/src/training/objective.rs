use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{forward, Model, Params, RayBatch, SourceSet};
use crate::tensor::Tensor;

fn mean_squared_rows(pred: &[f64], gt: &[f64], dim: usize) -> Result<f64> {
    if pred.len() != gt.len() || dim == 0 || !pred.len().is_multiple_of(dim) {
        return Err(Error::domain("prediction and target shapes differ"));
    }
    if pred.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let rows = pred.len() / dim;
    let s: f64 = pred.iter().zip(gt).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / rows as f64)
}

/// Mean over rays of `|c_gt - c_pred|^2`; colours are packed three per ray.
pub fn loss_rgb(pred: &[f64], gt: &[f64]) -> Result<f64> {
    mean_squared_rows(pred, gt, 3)
}

/// Mean over rays of `|f_gt - f_pred|^2` for `dim`-channel features.
pub fn loss_feat(pred: &[f64], gt: &[f64], dim: usize) -> Result<f64> {
    mean_squared_rows(pred, gt, dim)
}

/// Ground truth for one batch of rays.
#[derive(Clone, Debug)]
pub struct Targets {
    /// `[R, 3]`.
    pub rgb: Tensor,
    /// `[R, D_feat]`; its presence switches the feature term on.
    pub feat: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub rgb: f64,
    pub feat: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub rgb: f64,
    pub feat: Option<f64>,
    pub total: f64,
}

/// Evaluates `feat * L_feat + rgb * L_rgb` (or plain `L_rgb` without feature
/// targets) and, when asked, its gradient with respect to every parameter.
pub fn objective(
    model: &Model,
    sources: &SourceSet,
    batch: &RayBatch,
    targets: &Targets,
    weights: Weights,
    with_grad: bool,
) -> Result<(LossParts, Option<Params>)> {
    let with_feat = targets.feat.is_some();
    if with_feat && !model.has_feature_head() {
        return Err(Error::Capability(
            "feature loss needs a feature head".into(),
        ));
    }
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, with_grad);
    let out = forward(&mut g, &b, &model.config, sources, batch, with_feat)?;
    let lr = g.mse(out.rgb, targets.rgb.clone());
    let (total, lf) = match (&targets.feat, out.feat) {
        (Some(ft), Some(fv)) => {
            let lf = g.mse(fv, ft.clone());
            let a = g.scale(lf, weights.feat);
            let c = g.scale(lr, weights.rgb);
            (g.add(a, c), Some(lf))
        }
        _ => (lr, None),
    };
    let parts = LossParts {
        rgb: g.value(lr).data()[0],
        feat: lf.map(|v| g.value(v).data()[0]),
        total: g.value(total).data()[0],
    };
    let grads = with_grad.then(|| {
        let gr = g.backward(total);
        b.collect(&model.params, &gr)
    });
    Ok((parts, grads))
}
