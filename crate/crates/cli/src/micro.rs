//! A tiny deterministic data root: one small scene and a stage-1 and stage-2
//! checkpoint trained for a few steps. Used by `serve --check` and tests.

use std::fs;
use std::path::Path;

use fieldseg::model::{write_checkpoint, ModelConfig, Readout};
use fieldseg::scene::{
    make_scene, make_teacher_features, reduce_teacher_features, save_scene, SceneSpec,
};
use fieldseg::training::{train_stage1, train_stage2, AdamConfig, Hooks, TrainConfig};
use fieldseg::{Error, Result, Scene};

pub const SCENE_ID: &str = "micro";
/// Second training scene; training needs at least two.
pub const SECOND_SCENE_ID: &str = "micro-b";
pub const STAGE1_ID: &str = "micro-s1";
pub const STAGE2_ID: &str = "micro-s2";

pub fn model_config() -> ModelConfig {
    ModelConfig {
        blocks: 1,
        stage2_blocks: 1,
        token_dim: 8,
        heads: 2,
        mlp_hidden: 8,
        sources: 2,
        samples: 8,
        img_dim: 4,
        feat_dim: 8,
        pe_freqs: 1,
        dir_in_source_tokens: false,
        readout: Readout::RayTransformer,
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        rays_per_iter: 8,
        stage2_rays_per_iter: None,
        stage1_iters: 3,
        stage2_iters: 3,
        stage1_lr: 1e-3,
        stage2_lr: 1e-3,
        backbone_lr_factor: 0.1,
        lambda_rgb: 0.1,
        lambda_feat: 1.0,
        adam: AdamConfig::default(),
        seed: 0,
        stratified: false,
        augment: false,
    }
}

pub fn micro_scene(seed: u64) -> Result<Scene> {
    let spec = SceneSpec {
        seed,
        n_objects: 2,
        camera_count: 5,
        width: 16,
        height: 12,
        ..SceneSpec::default()
    };
    reduce_teacher_features(
        &make_teacher_features(&make_scene(&spec)?, 8, 0.1, seed)?,
        8,
    )
}

/// Writes `scenes/micro{,-b}/` and `checkpoints/micro-s{1,2}.gsnc` under
/// `root`.
pub fn build_micro_root(root: &Path) -> Result<()> {
    let scenes = [micro_scene(3)?, micro_scene(4)?];
    save_scene(&scenes[0], &root.join("scenes").join(SCENE_ID))?;
    save_scene(&scenes[1], &root.join("scenes").join(SECOND_SCENE_ID))?;
    let ck_dir = root.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let cfg = train_config();
    let (s1, _) = train_stage1(&scenes, &model_config(), &cfg, Hooks::default())?;
    let (s2, _) = train_stage2(&s1, &scenes, &cfg, Hooks::default())?;
    write_checkpoint(&s1, &ck_dir.join(format!("{STAGE1_ID}.gsnc")))?;
    write_checkpoint(&s2, &ck_dir.join(format!("{STAGE2_ID}.gsnc")))?;
    Ok(())
}
