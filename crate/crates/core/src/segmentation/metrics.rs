use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn of(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (p, g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    /// `1` when both masks are empty.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / (self.tp + self.fp + self.tn + self.fn_) as f64
    }
}

/// Area under the precision-recall curve for "score ≤ t" detection, swept
/// over every distinct score and integrated with the trapezoid rule from
/// (recall 0, precision 1). A mask without positives scores `1`.
pub fn average_precision(scores: &[f64], gt: &[bool]) -> f64 {
    let positives = gt.iter().filter(|g| **g).count();
    if positives == 0 {
        return 1.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let mut area = 0.0;
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
        let r = tp as f64 / positives as f64;
        let p = tp as f64 / (tp + fp) as f64;
        area += (r - prev_r) * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    area
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub view_id: usize,
    pub iou: f64,
    pub accuracy: f64,
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub mean_iou: f64,
    pub accuracy: f64,
    pub map: f64,
    pub views: Vec<ViewScore>,
}

impl SegMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// One evaluated view: predicted mask, ground truth and the per-pixel
/// distance scores behind the prediction. Without scores the mask itself is
/// ranked (selected pixels first).
pub struct EvalView<'a> {
    pub view_id: usize,
    pub pred: &'a [bool],
    pub gt: &'a [bool],
    pub scores: Option<&'a [f64]>,
}

pub fn eval_masks(views: &[EvalView<'_>]) -> Result<SegMetrics> {
    if views.is_empty() {
        return Err(Error::domain("no views to evaluate"));
    }
    let mut out = Vec::with_capacity(views.len());
    for v in views {
        if v.pred.len() != v.gt.len() || v.pred.is_empty() {
            return Err(Error::domain(format!(
                "view {}: prediction has {} pixels, ground truth {}",
                v.view_id,
                v.pred.len(),
                v.gt.len()
            )));
        }
        let c = Confusion::of(v.pred, v.gt);
        let ap = match v.scores {
            Some(s) if s.len() != v.gt.len() => {
                return Err(Error::domain(format!(
                    "view {}: score map size differs",
                    v.view_id
                )))
            }
            Some(s) => average_precision(s, v.gt),
            None => {
                let s: Vec<f64> = v.pred.iter().map(|p| if *p { 0.0 } else { 1.0 }).collect();
                average_precision(&s, v.gt)
            }
        };
        out.push(ViewScore {
            view_id: v.view_id,
            iou: c.iou(),
            accuracy: c.accuracy(),
            average_precision: ap,
        });
    }
    let n = out.len() as f64;
    Ok(SegMetrics {
        mean_iou: out.iter().map(|v| v.iou).sum::<f64>() / n,
        accuracy: out.iter().map(|v| v.accuracy).sum::<f64>() / n,
        map: out.iter().map(|v| v.average_precision).sum::<f64>() / n,
        views: out,
    })
}
