use std::fs;
use std::path::Path;

use fieldseg::features::{read_feat, write_feat};
use fieldseg::model::read_checkpoint;
use fieldseg::segmentation::{
    eval_masks, read_mask_png, run_benchmark, segment_multiview, write_mask_png, EvalView,
    FeatureSource, StrokeSet,
};
use fieldseg::{Error, FeatureImage, Provenance, Scene};
use serde::{Deserialize, Serialize};

use super::load;
use crate::args::{BenchmarkArgs, EvalArgs, SegmentArgs};
use crate::error::{CliError, CliResult};

pub fn mask_file(view: usize) -> String {
    format!("view_{view:03}.png")
}

pub fn score_file(view: usize) -> String {
    format!("view_{view:03}.score")
}

fn parse_view(name: &str) -> Option<usize> {
    name.strip_prefix("view_")?
        .strip_suffix(".png")?
        .parse()
        .ok()
}

#[derive(Serialize, Deserialize)]
struct ViewSummary {
    view_id: usize,
    selected: usize,
}

#[derive(Serialize, Deserialize)]
struct SegmentSummary {
    scene: String,
    k: usize,
    seed: u64,
    threshold: f64,
    clusters: usize,
    kmeans_iterations: usize,
    inertia: f64,
    views: Vec<ViewSummary>,
}

fn precomputed(dir: &Path, scene: &Scene) -> CliResult<Vec<FeatureImage>> {
    (0..scene.views.len())
        .map(|v| {
            Ok(read_feat(
                &dir.join(format!("{v:03}.feat")),
                Provenance::Student,
            )?)
        })
        .collect()
}

pub fn segment(a: &SegmentArgs) -> CliResult<()> {
    let scene = load(&a.scene)?;
    let strokes = StrokeSet::read(&a.strokes)?;
    let views = a
        .views
        .clone()
        .unwrap_or_else(|| (0..scene.views.len()).collect());
    let ck;
    let feats;
    let source = match (&a.ckpt, &a.feat_dir) {
        (Some(p), _) => {
            ck = read_checkpoint(p)?;
            FeatureSource::Rendered {
                model: &ck.model,
                scene: &scene,
            }
        }
        (None, Some(d)) => {
            feats = precomputed(d, &scene)?;
            FeatureSource::Precomputed(&feats)
        }
        (None, None) => unreachable!("clap requires --ckpt or --feat-dir"),
    };
    let seg = segment_multiview(&source, &strokes, &views, a.k, a.tau, a.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut summary = Vec::new();
    for v in &seg.views {
        write_mask_png(&v.mask, &a.out.join(mask_file(v.view_id)))?;
        let scores = FeatureImage::new(
            v.mask.height,
            v.mask.width,
            1,
            v.scores.clone(),
            Provenance::Student,
        )?;
        write_feat(&scores, &a.out.join(score_file(v.view_id)))?;
        summary.push(ViewSummary {
            view_id: v.view_id,
            selected: v.mask.count(),
        });
        println!("view {} selected {}", v.view_id, v.mask.count());
    }
    let report = SegmentSummary {
        scene: scene.id.clone(),
        k: a.k,
        seed: a.seed,
        threshold: a.tau,
        clusters: seg.centers.k(),
        kmeans_iterations: seg.centers.iterations,
        inertia: seg.centers.inertia,
        views: summary,
    };
    let path = a.out.join("segmentation.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&report).expect("summary serializes"),
    )
    .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let entries = fs::read_dir(&a.masks).map_err(|e| Error::io(&a.masks, e))?;
    let mut views: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| parse_view(e.file_name().to_str()?))
        .collect();
    views.sort_unstable();
    if views.is_empty() {
        return Err(
            Error::domain(format!("no view_NNN.png masks in {}", a.masks.display())).into(),
        );
    }
    let scene = a.scene.as_ref().map(|d| load(d)).transpose()?;
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    let mut scores = Vec::new();
    for v in &views {
        let (w, h, pred) = read_mask_png(&a.masks.join(mask_file(*v)))?;
        let gt = match (&a.gt, &scene) {
            (Some(dir), _) => {
                let p = dir.join(mask_file(*v));
                let (gw, gh, gt) = read_mask_png(&p)?;
                if (gw, gh) != (w, h) {
                    return Err(Error::format(p, "ground-truth size differs from the mask").into());
                }
                gt
            }
            (None, Some(s)) => {
                let id = a
                    .instance
                    .ok_or_else(|| CliError::usage("--scene needs --instance"))?;
                let masks = s.instance_masks.as_ref().ok_or_else(|| {
                    Error::domain(format!("scene {} has no instance masks", s.id))
                })?;
                let m = masks
                    .get(*v)
                    .ok_or_else(|| Error::NotFound(format!("view {v}")))?;
                if (m.width, m.height) != (w, h) {
                    return Err(Error::domain(format!(
                        "mask for view {v} does not match the scene"
                    ))
                    .into());
                }
                m.mask_of(id)
            }
            (None, None) => unreachable!("clap requires --gt or --scene"),
        };
        let sp = a.masks.join(score_file(*v));
        let s = if sp.exists() {
            let f = read_feat(&sp, Provenance::Student)?;
            if f.dim != 1 || (f.width, f.height) != (w, h) {
                return Err(Error::format(sp, "score map does not match the mask").into());
            }
            Some(f.data)
        } else {
            None
        };
        preds.push(pred);
        gts.push(gt);
        scores.push(s);
    }
    let ev: Vec<EvalView<'_>> = views
        .iter()
        .enumerate()
        .map(|(i, v)| EvalView {
            view_id: *v,
            pred: &preds[i],
            gt: &gts[i],
            scores: scores[i].as_deref(),
        })
        .collect();
    let m = eval_masks(&ev)?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.masks.join("metrics.json"));
    m.write(&out)?;
    println!("mean_iou {:.6}", m.mean_iou);
    println!("accuracy {:.6}", m.accuracy);
    println!("map {:.6}", m.map);
    Ok(())
}

pub fn benchmark(a: &BenchmarkArgs) -> CliResult<()> {
    let ck = read_checkpoint(&a.ckpt)?;
    let scene = load(&a.scene)?;
    let report = run_benchmark(
        &FeatureSource::Rendered {
            model: &ck.model,
            scene: &scene,
        },
        &scene,
        &a.opts.spec(),
    )?;
    write_json(&a.out, &report)?;
    for r in &report.instances {
        println!("instance {} mean_iou {:.4}", r.instance, r.metrics.mean_iou);
    }
    println!("threshold {:.3}", report.threshold);
    println!("mean_iou {:.6}", report.mean_iou);
    println!("accuracy {:.6}", report.accuracy);
    println!("map {:.6}", report.map);
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}
