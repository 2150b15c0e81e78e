use std::fs;

use fieldseg::model::{read_checkpoint, write_checkpoint, Checkpoint, ModelConfig, Readout, Stage};
use fieldseg::segmentation::{run_benchmark, BenchmarkSpec, FeatureSource};
use fieldseg::training::{train_stage1, train_stage2, Hooks, Profile, TrainConfig};
use fieldseg::{Error, Scene};
use serde::{Deserialize, Serialize};

use super::load;
use super::segment::write_json;
use crate::args::{AblateArgs, Ablation};
use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mean_iou: f64,
    pub accuracy: f64,
    pub map: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ablation: String,
    pub profile: String,
    pub held_out_scene: String,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub seed: u64,
    pub benchmark: BenchmarkSpec,
    /// The unmodified model first, then the alternative.
    pub rows: Vec<AblationRow>,
    /// `rows[0].mean_iou - rows[1].mean_iou`.
    pub difference: f64,
    /// Sign of `difference`: 1, 0 or -1.
    pub sign: i8,
}

fn variants(which: Ablation, base: &ModelConfig) -> [(&'static str, ModelConfig); 2] {
    let gsn = ModelConfig {
        dir_in_source_tokens: false,
        readout: Readout::RayTransformer,
        ..base.clone()
    };
    let alt = match which {
        Ablation::ViewDir => (
            "view-dependent-backbone",
            ModelConfig {
                dir_in_source_tokens: true,
                ..gsn.clone()
            },
        ),
        Ablation::VolRender => (
            "volumetric-readout",
            ModelConfig {
                readout: Readout::Volumetric,
                ..gsn.clone()
            },
        ),
    };
    [("gsn", gsn), alt]
}

fn train_variant(
    scenes: &[Scene],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> CliResult<Checkpoint> {
    let (s1, _) = train_stage1(scenes, model, cfg, Hooks::default())?;
    let (s2, _) = train_stage2(&s1, scenes, cfg, Hooks::default())?;
    Ok(s2)
}

/// Trains (or loads) both variants, benchmarks them on the held-out scene and
/// writes the two-row report.
pub fn ablate(a: &AblateArgs) -> CliResult<AblationReport> {
    let mut profile = Profile::by_name(&a.profile)?;
    if let Some(v) = a.stage1_iters {
        profile.train.stage1_iters = v;
    }
    if let Some(v) = a.stage2_iters {
        profile.train.stage2_iters = v;
    }
    if let Some(v) = a.seed {
        profile.train.seed = v;
    }
    let scenes = a
        .scenes
        .iter()
        .map(|d| load(d))
        .collect::<CliResult<Vec<_>>>()?;
    let held = load(&a.held_out)?;
    fs::create_dir_all(&a.work).map_err(|e| Error::io(&a.work, e))?;
    let spec = a.bench.spec();
    let mut rows = Vec::new();
    for (i, (name, cfg)) in variants(a.name, &profile.model).into_iter().enumerate() {
        let ck = match (&a.gsn_checkpoint, i) {
            (Some(p), 0) => {
                let ck = read_checkpoint(p)?;
                if ck.stage != Stage::Two || ck.model.config != cfg {
                    return Err(Error::config(format!(
                        "{} is not a stage-2 checkpoint of the unmodified {} model",
                        p.display(),
                        profile.name
                    ))
                    .into());
                }
                ck
            }
            _ => {
                eprintln!("training {name}");
                let ck = train_variant(&scenes, &cfg, &profile.train)?;
                write_checkpoint(&ck, &a.work.join(format!("{name}.gsnc")))?;
                ck
            }
        };
        let report = run_benchmark(
            &FeatureSource::Rendered {
                model: &ck.model,
                scene: &held,
            },
            &held,
            &spec,
        )?;
        println!("{name} mean_iou {:.6}", report.mean_iou);
        rows.push(AblationRow {
            variant: name.to_string(),
            mean_iou: report.mean_iou,
            accuracy: report.accuracy,
            map: report.map,
            threshold: report.threshold,
        });
    }
    let difference = rows[0].mean_iou - rows[1].mean_iou;
    let report = AblationReport {
        ablation: match a.name {
            Ablation::ViewDir => "view-dir",
            Ablation::VolRender => "vol-render",
        }
        .into(),
        profile: profile.name.clone(),
        held_out_scene: held.id.clone(),
        stage1_iters: profile.train.stage1_iters,
        stage2_iters: profile.train.stage2_iters,
        seed: profile.train.seed,
        benchmark: spec,
        rows,
        difference,
        sign: if difference > 0.0 {
            1
        } else if difference < 0.0 {
            -1
        } else {
            0
        },
    };
    write_json(&a.out, &report)?;
    println!("difference {difference:.6}");
    Ok(report)
}
