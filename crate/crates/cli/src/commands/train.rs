use std::path::PathBuf;

use fieldseg::model::{read_checkpoint, write_checkpoint, Readout, Stage};
use fieldseg::training::{
    evaluate_view, train_stage1, train_stage2, HeldOut, Hooks, LogRecord, Profile,
};

use super::{load, require_parent};
use crate::args::{ReadoutArg, TrainArgs};
use crate::error::{CliError, CliResult};

/// Profile with every command-line override applied.
pub(crate) fn configured_profile(a: &TrainArgs) -> CliResult<Profile> {
    let mut p = Profile::by_name(&a.profile)?;
    let m = &mut p.model;
    if let Some(v) = a.samples {
        m.samples = v;
    }
    if let Some(v) = a.sources {
        m.sources = v;
    }
    if let Some(v) = a.blocks {
        m.blocks = v;
    }
    if let Some(v) = a.stage2_blocks {
        m.stage2_blocks = v;
    }
    if let Some(v) = a.token_dim {
        m.token_dim = v;
    }
    if let Some(v) = a.feat_dim {
        m.feat_dim = v;
    }
    if a.dir_in_source_tokens {
        m.dir_in_source_tokens = true;
    }
    if let Some(r) = a.readout {
        m.readout = match r {
            ReadoutArg::RayTransformer => Readout::RayTransformer,
            ReadoutArg::Volumetric => Readout::Volumetric,
        };
    }
    let t = &mut p.train;
    if let Some(v) = a.iters {
        match a.stage {
            1 => t.stage1_iters = v,
            _ => t.stage2_iters = v,
        }
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.rays {
        t.rays_per_iter = v;
    }
    if let Some(v) = a.stage2_rays {
        t.stage2_rays_per_iter = Some(v);
    }
    if let Some(v) = a.lr {
        t.stage1_lr = v;
    }
    if let Some(v) = a.stage2_lr {
        t.stage2_lr = v;
    }
    if let Some(v) = a.backbone_lr_factor {
        t.backbone_lr_factor = v;
    }
    if let Some(v) = a.lambda_rgb {
        t.lambda_rgb = v;
    }
    if let Some(v) = a.lambda_feat {
        t.lambda_feat = v;
    }
    if a.no_augment {
        t.augment = false;
    }
    if a.no_stratified {
        t.stratified = false;
    }
    Ok(p)
}

fn model_flags_set(a: &TrainArgs) -> bool {
    a.samples.is_some()
        || a.sources.is_some()
        || a.blocks.is_some()
        || a.stage2_blocks.is_some()
        || a.token_dim.is_some()
        || a.feat_dim.is_some()
        || a.dir_in_source_tokens
        || a.readout.is_some()
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    if a.stage == 2 && a.from.is_none() {
        return Err(CliError::usage("stage 2 needs --from <stage-1 checkpoint>"));
    }
    if a.stage == 1 && a.from.is_some() {
        return Err(CliError::usage("--from only applies to stage 2"));
    }
    if a.stage == 2 && model_flags_set(a) {
        return Err(CliError::usage(
            "model flags are fixed by the stage-1 checkpoint",
        ));
    }
    require_parent(&a.out)?;
    let profile = configured_profile(a)?;
    let scenes = a
        .scenes
        .iter()
        .map(|d| load(d))
        .collect::<CliResult<Vec<_>>>()?;
    let held = a.held_out.as_ref().map(|d| load(d)).transpose()?;
    let progress = a.progress;
    let mut on_record = |r: &LogRecord| match r {
        LogRecord::Step {
            iteration,
            total,
            elapsed,
            ..
        } if progress > 0 && iteration % progress as u64 == 0 => {
            eprintln!("iter {iteration} loss {total:.6} {elapsed:.1}s");
        }
        LogRecord::Eval {
            iteration,
            psnr,
            feat_mse,
        } => match feat_mse {
            Some(f) => eprintln!("eval {iteration} psnr {psnr:.3} feat_mse {f:.5}"),
            None => eprintln!("eval {iteration} psnr {psnr:.3}"),
        },
        _ => {}
    };
    let hooks = Hooks {
        held_out: held
            .as_ref()
            .filter(|_| a.eval_every > 0)
            .map(|scene| HeldOut {
                scene,
                view: a.held_out_view,
                every: a.eval_every,
            }),
        on_record: Some(&mut on_record),
    };
    let (ck, log) = match a.stage {
        1 => train_stage1(&scenes, &profile.model, &profile.train, hooks)?,
        _ => {
            let from = read_checkpoint(a.from.as_ref().expect("checked above"))?;
            if from.stage != Stage::One {
                return Err(CliError::usage("--from must be a stage-1 checkpoint"));
            }
            train_stage2(&from, &scenes, &profile.train, hooks)?
        }
    };
    write_checkpoint(&ck, &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p: PathBuf = a.out.clone().into_os_string().into();
        p.as_mut_os_string().push(".log.jsonl");
        p
    });
    log.write(&log_path)?;
    if let Some(scene) = &held {
        let m = evaluate_view(
            &ck.model,
            scene,
            a.held_out_view,
            ck.model.has_feature_head(),
        )?;
        println!("held_out_psnr {:.4}", m.psnr);
        println!("baseline_psnr {:.4}", m.baseline_psnr);
        if let (Some(f), Some(b), Some(c)) = (m.feat_mse, m.feat_baseline_mse, m.median_cosine) {
            println!("held_out_feat_mse {f:.6}");
            println!("baseline_feat_mse {b:.6}");
            println!("median_cosine {c:.4}");
        }
    }
    if let Some(total) = log.last_total() {
        println!("final_loss {total:.6}");
    }
    Ok(())
}
