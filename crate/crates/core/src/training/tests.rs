use super::*;
use crate::geometry::generate_ray;
use crate::model::{
    Depths, Model, ModelConfig, Params, RayBatch, Readout, SourceSet, Stage, FEATURE_PREFIX,
};
use crate::scene::{make_scene, make_teacher_features, select_source_views, Scene, SceneSpec};
use crate::tensor::Tensor;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        blocks: 1,
        stage2_blocks: 1,
        token_dim: 8,
        heads: 2,
        mlp_hidden: 8,
        sources: 2,
        samples: 4,
        img_dim: 4,
        feat_dim: 4,
        pe_freqs: 1,
        dir_in_source_tokens: false,
        readout: Readout::RayTransformer,
    }
}

fn tiny_train(iters: usize) -> TrainConfig {
    TrainConfig {
        rays_per_iter: 8,
        stage2_rays_per_iter: None,
        stage1_iters: iters,
        stage2_iters: iters,
        ..Profile::desk().train
    }
}

fn scenes(n: u64) -> Vec<Scene> {
    (0..n)
        .map(|seed| {
            let s = SceneSpec {
                seed,
                camera_count: 4,
                width: 12,
                height: 10,
                ..SceneSpec::default()
            };
            make_teacher_features(&make_scene(&s).unwrap(), 4, 0.1, seed).unwrap()
        })
        .collect()
}

fn fixed_batch(cfg: &ModelConfig, scene: &Scene) -> (SourceSet, RayBatch, Targets) {
    let view = 1;
    let cam = &scene.views[view].camera;
    let src = select_source_views(scene, cam, cfg.sources).unwrap();
    let sources = SourceSet::from_scene(scene, &src).unwrap();
    let pix: Vec<(usize, usize)> = (0..6).map(|i| (2 * i % 12, (3 * i + 1) % 10)).collect();
    let rays: Vec<_> = pix
        .iter()
        .map(|(x, y)| generate_ray(cam, [*x as f64, *y as f64]).unwrap())
        .collect();
    let rgb = pix
        .iter()
        .flat_map(|(x, y)| scene.views[view].rgb.pixel(y * 12 + x))
        .collect();
    let f = &scene.teacher_features.as_ref().unwrap()[view];
    let feat = pix
        .iter()
        .flat_map(|(x, y)| f.at(*x, *y).to_vec())
        .collect();
    let batch =
        RayBatch::build(cfg, &sources, &rays, scene.near, scene.far, Depths::Uniform).unwrap();
    let targets = Targets {
        rgb: Tensor::matrix(6, 3, rgb),
        feat: Some(Tensor::matrix(6, cfg.feat_dim, feat)),
    };
    (sources, batch, targets)
}

fn backbone(p: &Params) -> Vec<(String, Tensor)> {
    p.iter()
        .filter(|(k, _)| !k.starts_with(FEATURE_PREFIX))
        .map(|(k, t)| (k.clone(), t.clone()))
        .collect()
}

#[test]
fn zero_iterations_leave_the_initialization() {
    let cfg = tiny_model();
    let (ck, log) = train_stage1(&scenes(2), &cfg, &tiny_train(0), Hooks::default()).unwrap();
    assert_eq!(ck.model, Model::new(cfg, ck.seed).unwrap());
    assert!(ck.optimizer.is_none());
    assert_eq!(ck.iteration, 0);
    assert!(log.losses().is_empty());
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny_model();
    let data = scenes(2);
    let tc = tiny_train(3);
    let (a, la) = train_stage1(&data, &cfg, &tc, Hooks::default()).unwrap();
    let (b, lb) = train_stage1(&data, &cfg, &tc, Hooks::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(la.losses(), lb.losses());
    let (c, _) = train_stage2(&a, &data, &tc, Hooks::default()).unwrap();
    let (d, _) = train_stage2(&b, &data, &tc, Hooks::default()).unwrap();
    assert_eq!(c, d);
    let other = TrainConfig {
        seed: tc.seed + 1,
        ..tc
    };
    let (e, _) = train_stage1(&data, &cfg, &other, Hooks::default()).unwrap();
    assert_ne!(a.model, e.model);
}

#[test]
fn frozen_backbone_and_no_feature_loss_change_nothing() {
    let cfg = tiny_model();
    let data = scenes(2);
    let (s1, _) = train_stage1(&data, &cfg, &tiny_train(2), Hooks::default()).unwrap();
    let tc = TrainConfig {
        lambda_feat: 0.0,
        backbone_lr_factor: 0.0,
        ..tiny_train(3)
    };
    let (s2, _) = train_stage2(&s1, &data, &tc, Hooks::default()).unwrap();
    assert_eq!(backbone(&s2.model.params), backbone(&s1.model.params));
    let mut fresh = s1.model.clone();
    fresh.add_feature_head(tc.seed.wrapping_add(0x4ead));
    assert_eq!(s2.model.params, fresh.params);
}

#[test]
fn frozen_backbone_with_feature_loss_trains_only_the_head() {
    let cfg = tiny_model();
    let data = scenes(2);
    let (s1, _) = train_stage1(&data, &cfg, &tiny_train(1), Hooks::default()).unwrap();
    let tc = TrainConfig {
        backbone_lr_factor: 0.0,
        ..tiny_train(2)
    };
    let (s2, log) = train_stage2(&s1, &data, &tc, Hooks::default()).unwrap();
    assert_eq!(backbone(&s2.model.params), backbone(&s1.model.params));
    assert_eq!(s2.stage, Stage::Two);
    assert!(s2.model.has_feature_head());
    match &log.records[0] {
        LogRecord::Step {
            lr_backbone,
            lr_head,
            ..
        } => {
            assert_eq!(*lr_backbone, 0.0);
            assert_eq!(*lr_head, Some(tc.stage2_lr));
        }
        other => panic!("unexpected record {other:?}"),
    }
}

#[test]
fn a_small_step_reduces_the_loss() {
    let cfg = tiny_model();
    let data = scenes(1);
    let mut model = Model::new(cfg.clone(), 4).unwrap();
    model.add_feature_head(5);
    let (sources, batch, targets) = fixed_batch(&cfg, &data[0]);
    let w = Weights {
        rgb: 0.1,
        feat: 1.0,
    };
    let (before, grads) = objective(&model, &sources, &batch, &targets, w, true).unwrap();
    let grads = grads.unwrap();
    for (name, t) in model.params.iter_mut() {
        let g = grads.get(name).unwrap();
        for (v, d) in t.data_mut().iter_mut().zip(g.data()) {
            *v -= 1e-3 * d;
        }
    }
    let (after, _) = objective(&model, &sources, &batch, &targets, w, false).unwrap();
    assert!(
        after.total < before.total,
        "{} -> {}",
        before.total,
        after.total
    );
}

#[test]
fn loss_weights_scale_the_total() {
    let cfg = tiny_model();
    let data = scenes(1);
    let mut model = Model::new(cfg.clone(), 4).unwrap();
    model.add_feature_head(5);
    let (sources, batch, targets) = fixed_batch(&cfg, &data[0]);
    let one = Weights {
        rgb: 0.3,
        feat: 0.7,
    };
    let two = Weights {
        rgb: 0.6,
        feat: 1.4,
    };
    let (a, _) = objective(&model, &sources, &batch, &targets, one, false).unwrap();
    let (b, _) = objective(&model, &sources, &batch, &targets, two, false).unwrap();
    assert!((b.total - 2.0 * a.total).abs() < 1e-12 * a.total.max(1.0));
    assert_eq!(a.rgb, b.rgb);
    let expected = 0.3 * a.rgb + 0.7 * a.feat.unwrap();
    assert!((a.total - expected).abs() < 1e-15);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for readout in [Readout::RayTransformer, Readout::Volumetric] {
        let cfg = ModelConfig {
            readout,
            ..tiny_model()
        };
        let data = scenes(1);
        let mut model = Model::new(cfg.clone(), 11).unwrap();
        model.add_feature_head(12);
        // Wake up zero-initialized outputs so their inputs receive gradient.
        for (i, (_, t)) in model.params.iter_mut().enumerate() {
            for (j, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.2 * ((i * 97 + j) as f64 * 0.37).sin();
            }
        }
        let (sources, batch, targets) = fixed_batch(&cfg, &data[0]);
        let w = Weights {
            rgb: 0.5,
            feat: 1.0,
        };
        let r = gradient_check(&model, &sources, &batch, &targets, w, 60, 1e-6, 1e-4, 3).unwrap();
        assert!(r.passed, "{readout:?}: max rel error {}", r.max_rel_error);
    }
}

#[test]
fn training_needs_two_scenes_and_enough_views() {
    let cfg = tiny_model();
    let one = scenes(1);
    assert!(matches!(
        train_stage1(&one, &cfg, &tiny_train(1), Hooks::default()),
        Err(crate::Error::Config(_))
    ));
    let wide = ModelConfig { sources: 4, ..cfg };
    assert!(matches!(
        train_stage1(&scenes(2), &wide, &tiny_train(1), Hooks::default()),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn stage_two_checks_its_inputs() {
    let cfg = tiny_model();
    let data = scenes(2);
    let (s1, _) = train_stage1(&data, &cfg, &tiny_train(0), Hooks::default()).unwrap();
    let (s2, _) = train_stage2(&s1, &data, &tiny_train(0), Hooks::default()).unwrap();
    assert!(train_stage2(&s2, &data, &tiny_train(1), Hooks::default()).is_err());
    let mut bare = data.clone();
    bare[1].teacher_features = None;
    assert!(matches!(
        train_stage2(&s1, &bare, &tiny_train(1), Hooks::default()),
        Err(crate::Error::Config(_))
    ));
    let wide: Vec<Scene> = data
        .iter()
        .map(|s| make_teacher_features(s, 6, 0.0, 1).unwrap())
        .collect();
    assert!(matches!(
        train_stage2(&s1, &wide, &tiny_train(1), Hooks::default()),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn held_out_evaluation_is_logged() {
    let cfg = tiny_model();
    let data = scenes(3);
    let mut seen = 0;
    let mut count = |_: &LogRecord| seen += 1;
    let hooks = Hooks {
        held_out: Some(HeldOut {
            scene: &data[2],
            view: 0,
            every: 2,
        }),
        on_record: Some(&mut count),
    };
    let (_, log) = train_stage1(&data[..2], &cfg, &tiny_train(3), hooks).unwrap();
    let evals: Vec<u64> = log
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval {
                iteration, psnr, ..
            } => {
                assert!(psnr.is_finite());
                Some(*iteration)
            }
            _ => None,
        })
        .collect();
    assert_eq!(evals, vec![2, 3]);
    assert_eq!(seen, 5);
}
