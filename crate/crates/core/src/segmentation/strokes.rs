use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureImage;

/// Largest distance between consecutive disc stamps along a segment, in pixels.
pub const STAMP_STEP: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub view_id: usize,
    /// Polyline vertices in pixel coordinates; pixel centres sit on integers.
    pub points: Vec<[f64; 2]>,
    pub brush_radius: f64,
}

/// A stroke file: `{"strokes": [{"view_id", "points", "brush_radius"}, ...]}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StrokeSet {
    pub strokes: Vec<Stroke>,
}

impl StrokeSet {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stroke set serializes")
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn views(&self) -> BTreeSet<usize> {
        self.strokes.iter().map(|s| s.view_id).collect()
    }

    /// Stroked pixels per view as sorted, distinct flat indices `y * width + x`.
    /// `size(view)` gives `(width, height)` or `None` for an unknown view.
    pub fn rasterize(
        &self,
        size: impl Fn(usize) -> Option<(usize, usize)>,
    ) -> Result<BTreeMap<usize, Vec<usize>>> {
        let mut out: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for (i, s) in self.strokes.iter().enumerate() {
            let (w, h) = size(s.view_id).ok_or_else(|| {
                Error::NotFound(format!("stroke {i} refers to unknown view {}", s.view_id))
            })?;
            if !(s.brush_radius >= 0.0 && s.brush_radius.is_finite()) {
                return Err(Error::domain(format!(
                    "stroke {i} has an invalid brush radius"
                )));
            }
            if s.points.is_empty() {
                return Err(Error::domain(format!("stroke {i} has no points")));
            }
            for p in &s.points {
                let inside =
                    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64;
                if !inside {
                    return Err(Error::domain(format!(
                        "stroke {i} point ({}, {}) lies outside the {w}x{h} view",
                        p[0], p[1]
                    )));
                }
            }
            let set = out.entry(s.view_id).or_default();
            let mut stamp = |c: [f64; 2]| stamp_disc(c, s.brush_radius, w, h, set);
            stamp(s.points[0]);
            for seg in s.points.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                let n = (len / STAMP_STEP).ceil().max(1.0) as usize;
                for k in 1..=n {
                    let t = k as f64 / n as f64;
                    stamp([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                }
            }
        }
        let out: BTreeMap<usize, Vec<usize>> = out
            .into_iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|(v, s)| (v, s.into_iter().collect()))
            .collect();
        if out.is_empty() {
            return Err(Error::domain("strokes cover no pixels"));
        }
        Ok(out)
    }
}

/// Marks the pixel nearest to `c` and every pixel centre within `r` of it.
fn stamp_disc(c: [f64; 2], r: f64, w: usize, h: usize, set: &mut BTreeSet<usize>) {
    let nx = (c[0].round() as usize).min(w - 1);
    let ny = (c[1].round() as usize).min(h - 1);
    set.insert(ny * w + nx);
    let x0 = (c[0] - r).ceil().max(0.0) as usize;
    let y0 = (c[1] - r).ceil().max(0.0) as usize;
    let x1 = ((c[0] + r).floor() as usize).min(w - 1);
    let y1 = ((c[1] + r).floor() as usize).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
            if dx * dx + dy * dy <= r * r {
                set.insert(y * w + x);
            }
        }
    }
}

/// Feature vectors under the strokes, one per distinct stroked pixel, in
/// (view, pixel) order.
pub fn collect_stroke_features(
    strokes: &StrokeSet,
    features: &BTreeMap<usize, FeatureImage>,
) -> Result<Vec<Vec<f64>>> {
    let pixels = strokes.rasterize(|v| features.get(&v).map(|f| (f.width, f.height)))?;
    let mut out = Vec::new();
    for (view, idx) in pixels {
        let f = &features[&view];
        out.extend(idx.iter().map(|i| f.pixel(*i).to_vec()));
    }
    Ok(out)
}
