use std::time::Instant;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::config::TrainConfig;
use super::eval::{evaluate_view, ViewMetrics};
use super::log::{LogRecord, TrainLog};
use super::objective::{objective, Targets, Weights};
use crate::error::{Error, Result};
use crate::geometry::generate_ray;
use crate::model::{
    Checkpoint, Depths, Model, ModelConfig, RayBatch, SourceSet, Stage, FEATURE_PREFIX,
};
use crate::scene::{select_source_views, Scene};
use crate::tensor::Tensor;

/// A view scored periodically during training.
pub struct HeldOut<'a> {
    pub scene: &'a Scene,
    pub view: usize,
    pub every: usize,
}

/// Optional extras for a training run.
#[derive(Default)]
pub struct Hooks<'a> {
    pub held_out: Option<HeldOut<'a>>,
    pub on_record: Option<&'a mut dyn FnMut(&LogRecord)>,
}

impl Hooks<'_> {
    fn emit(&mut self, log: &mut TrainLog, r: LogRecord) {
        if let Some(f) = self.on_record.as_mut() {
            f(&r);
        }
        log.push(r);
    }

    fn maybe_eval(
        &mut self,
        log: &mut TrainLog,
        model: &Model,
        iteration: u64,
        last: bool,
    ) -> Result<()> {
        let Some(h) = &self.held_out else {
            return Ok(());
        };
        if h.every == 0 || (!iteration.is_multiple_of(h.every as u64) && !last) {
            return Ok(());
        }
        let m: ViewMetrics = evaluate_view(model, h.scene, h.view, model.has_feature_head())?;
        self.emit(
            log,
            LogRecord::Eval {
                iteration,
                psnr: m.psnr,
                feat_mse: m.feat_mse,
            },
        );
        Ok(())
    }
}

/// Seeded draw of one scene per iteration, one target view and a ray batch.
struct Sampler<'a> {
    scenes: &'a [Scene],
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

struct Batch {
    sources: SourceSet,
    rays: RayBatch,
    targets: Targets,
}

impl<'a> Sampler<'a> {
    fn new(scenes: &'a [Scene], seed: u64) -> Self {
        Self {
            scenes,
            order: (0..scenes.len()).collect(),
            cursor: scenes.len(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_scene(&mut self) -> &'a Scene {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let s = &self.scenes[self.order[self.cursor]];
        self.cursor += 1;
        s
    }

    fn draw(
        &mut self,
        cfg: &ModelConfig,
        tcfg: &TrainConfig,
        rays_per_iter: usize,
        with_feat: bool,
    ) -> Result<Batch> {
        let scene = self.next_scene();
        let view = self.rng.random_range(0..scene.views.len());
        let src = select_source_views(scene, &scene.views[view].camera, cfg.sources)?;
        let mut sources = SourceSet::from_scene(scene, &src)?;
        let (rot, shift, perm) = if tcfg.augment {
            let angle = self.rng.random_range(0.0..std::f64::consts::TAU);
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner();
            let shift = Vector3::new(
                self.rng.random_range(-1.5..1.5),
                self.rng.random_range(-1.5..1.5),
                0.0,
            );
            let mut perm = [0usize, 1, 2];
            perm.shuffle(&mut self.rng);
            (rot, shift, perm)
        } else {
            (Matrix3::identity(), Vector3::zeros(), [0, 1, 2])
        };
        let moved = scene.views[view].camera.moved(&rot, &shift);
        let cam = &moved;
        for c in sources.cameras.iter_mut() {
            *c = c.moved(&rot, &shift);
        }
        permute_channels(sources.rgb.data_mut(), perm);
        let (w, h) = (cam.width, cam.height);
        let mut rays = Vec::with_capacity(rays_per_iter);
        let mut rgb = Vec::with_capacity(rays_per_iter * 3);
        let mut feat = Vec::new();
        for _ in 0..rays_per_iter {
            let x = self.rng.random_range(0..w);
            let y = self.rng.random_range(0..h);
            rays.push(generate_ray(cam, [x as f64, y as f64])?);
            let px = scene.views[view].rgb.pixel(y * w + x);
            rgb.extend(perm.map(|c| px[c]));
            if with_feat {
                let f = &scene
                    .teacher_features
                    .as_ref()
                    .expect("checked before training")[view];
                feat.extend_from_slice(f.at(x, y));
            }
        }
        let depths = if tcfg.stratified {
            Depths::Stratified(&mut self.rng)
        } else {
            Depths::Uniform
        };
        let batch = RayBatch::build(cfg, &sources, &rays, scene.near, scene.far, depths)?;
        let n = rays.len();
        Ok(Batch {
            sources,
            rays: batch,
            targets: Targets {
                rgb: Tensor::matrix(n, 3, rgb),
                feat: with_feat.then(|| Tensor::matrix(n, cfg.feat_dim, feat)),
            },
        })
    }
}

fn permute_channels(rgb: &mut [f64], perm: [usize; 3]) {
    for px in rgb.chunks_exact_mut(3) {
        let orig = [px[0], px[1], px[2]];
        for c in 0..3 {
            px[c] = orig[perm[c]];
        }
    }
}

fn check_scenes(scenes: &[Scene], cfg: &ModelConfig) -> Result<()> {
    if scenes.len() < 2 {
        return Err(Error::config("training needs at least two scenes"));
    }
    for s in scenes {
        if s.views.len() < cfg.sources + 1 {
            return Err(Error::config(format!(
                "scene {} has {} views; {} sources plus a target are needed",
                s.id,
                s.views.len(),
                cfg.sources
            )));
        }
    }
    Ok(())
}

/// Photometric training of the backbone and colour head.
pub fn train_stage1(
    scenes: &[Scene],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    mut hooks: Hooks<'_>,
) -> Result<(Checkpoint, TrainLog)> {
    model_config.validate()?;
    cfg.validate()?;
    check_scenes(scenes, model_config)?;
    let mut model = Model::new(model_config.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let mut sampler = Sampler::new(scenes, cfg.seed.wrapping_add(0x5eed_0001));
    let mut log = TrainLog::default();
    let start = Instant::now();
    for it in 1..=cfg.stage1_iters as u64 {
        let b = sampler.draw(model_config, cfg, cfg.rays_per_iter, false)?;
        let weights = Weights {
            rgb: 1.0,
            feat: 0.0,
        };
        let (loss, grads) = objective(&model, &b.sources, &b.rays, &b.targets, weights, true)?;
        adam.update(
            &mut model.params,
            &grads.expect("gradients requested"),
            |_| cfg.stage1_lr,
        );
        hooks.emit(
            &mut log,
            LogRecord::Step {
                iteration: it,
                loss_rgb: loss.rgb,
                loss_feat: None,
                total: loss.total,
                lr_backbone: cfg.stage1_lr,
                lr_head: None,
                elapsed: start.elapsed().as_secs_f64(),
            },
        );
        hooks.maybe_eval(&mut log, &model, it, it == cfg.stage1_iters as u64)?;
    }
    let mut ck = Checkpoint::new(Stage::One, model, cfg.seed, cfg.stage1_iters as u64);
    if cfg.stage1_iters > 0 {
        ck.optimizer = Some(adam.state());
    }
    Ok((ck, log))
}

/// Feature distillation: adds a fresh feature head and optimizes the
/// weighted joint loss with a slower backbone.
pub fn train_stage2(
    stage1: &Checkpoint,
    scenes: &[Scene],
    cfg: &TrainConfig,
    mut hooks: Hooks<'_>,
) -> Result<(Checkpoint, TrainLog)> {
    if stage1.stage != Stage::One {
        return Err(Error::config(
            "stage-2 training starts from a stage-1 checkpoint",
        ));
    }
    let mcfg = stage1.model.config.clone();
    cfg.validate()?;
    check_scenes(scenes, &mcfg)?;
    for s in scenes {
        match s.feature_dim() {
            None => {
                return Err(Error::config(format!(
                    "scene {} has no teacher features",
                    s.id
                )))
            }
            Some(d) if d != mcfg.feat_dim => {
                return Err(Error::config(format!(
                    "scene {} teacher features have {d} channels, model expects {}",
                    s.id, mcfg.feat_dim
                )))
            }
            _ => {}
        }
    }
    let mut model = stage1.model.clone();
    model.add_feature_head(cfg.seed.wrapping_add(0x4ead));
    let mut adam = Adam::new(cfg.adam);
    let mut sampler = Sampler::new(scenes, cfg.seed.wrapping_add(0x5eed_0002));
    let mut log = TrainLog::default();
    let lr_head = cfg.stage2_lr;
    let lr_backbone = cfg.stage2_lr * cfg.backbone_lr_factor;
    let weights = Weights {
        rgb: cfg.lambda_rgb,
        feat: cfg.lambda_feat,
    };
    let start = Instant::now();
    for it in 1..=cfg.stage2_iters as u64 {
        let b = sampler.draw(&mcfg, cfg, cfg.stage2_rays(), true)?;
        let (loss, grads) = objective(&model, &b.sources, &b.rays, &b.targets, weights, true)?;
        adam.update(
            &mut model.params,
            &grads.expect("gradients requested"),
            |name| {
                if name.starts_with(FEATURE_PREFIX) {
                    lr_head
                } else {
                    lr_backbone
                }
            },
        );
        hooks.emit(
            &mut log,
            LogRecord::Step {
                iteration: it,
                loss_rgb: loss.rgb,
                loss_feat: loss.feat,
                total: loss.total,
                lr_backbone,
                lr_head: Some(lr_head),
                elapsed: start.elapsed().as_secs_f64(),
            },
        );
        hooks.maybe_eval(&mut log, &model, it, it == cfg.stage2_iters as u64)?;
    }
    let mut ck = Checkpoint::new(Stage::Two, model, cfg.seed, cfg.stage2_iters as u64);
    if cfg.stage2_iters > 0 {
        ck.optimizer = Some(adam.state());
    }
    Ok((ck, log))
}
