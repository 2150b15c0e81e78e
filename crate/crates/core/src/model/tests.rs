use nalgebra::Vector3;

use super::*;
use crate::autodiff::Graph;
use crate::geometry::{generate_ray, Ray};
use crate::scene::{make_scene, make_teacher_features, select_source_views, Scene, SceneSpec};
use crate::tensor::Tensor;

pub(crate) fn tiny_config() -> ModelConfig {
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

pub(crate) fn tiny_scene(seed: u64) -> Scene {
    let s = SceneSpec {
        seed,
        camera_count: 5,
        width: 16,
        height: 12,
        ..SceneSpec::default()
    };
    make_teacher_features(&make_scene(&s).unwrap(), 4, 0.1, seed).unwrap()
}

/// Perturbs every parameter so that zero-initialized layers take part.
fn randomize(params: &mut Params, seed: u64) {
    for (i, (_, t)) in params.iter_mut().enumerate() {
        for (j, v) in t.data_mut().iter_mut().enumerate() {
            *v += 0.3 * ((seed as f64 + 1.0) * (i * 131 + j) as f64 * 0.618).sin();
        }
    }
}

fn random_model(cfg: ModelConfig, stage2: bool) -> Model {
    let mut m = Model::new(cfg, 3).unwrap();
    if stage2 {
        m.add_feature_head(4);
    }
    randomize(&mut m.params, 9);
    m
}

fn setup(scene: &Scene, cfg: &ModelConfig, pixels: &[[f64; 2]]) -> (SourceSet, Vec<Ray>) {
    let cam = &scene.views[2].camera;
    let src = select_source_views(scene, cam, cfg.sources).unwrap();
    let sources = SourceSet::from_scene(scene, &src).unwrap();
    let rays = pixels
        .iter()
        .map(|p| generate_ray(cam, *p).unwrap())
        .collect();
    (sources, rays)
}

fn batch_for(cfg: &ModelConfig, scene: &Scene, sources: &SourceSet, rays: &[Ray]) -> RayBatch {
    RayBatch::build(cfg, sources, rays, scene.near, scene.far, Depths::Uniform).unwrap()
}

#[test]
fn feature_path_ignores_direction_encodings() {
    let cfg = tiny_config();
    let scene = tiny_scene(1);
    let model = random_model(cfg.clone(), true);
    let (sources, rays) = setup(&scene, &cfg, &[[3.0, 4.0], [8.0, 6.0], [12.0, 2.0]]);
    let base = batch_for(&cfg, &scene, &sources, &rays);
    let mut zero = base.clone();
    zero.override_directions(DirectionInput::Zeros);
    let mut rand = base.clone();
    rand.override_directions(DirectionInput::Random(17));
    let a = model.predict(&sources, &zero, true).unwrap();
    let b = model.predict(&sources, &rand, true).unwrap();
    let c = model.predict(&sources, &base, true).unwrap();
    assert_eq!(a.feat, b.feat);
    assert_eq!(a.feat, c.feat);
    assert!(a.rgb.max_abs_diff(&b.rgb) > 0.0);
}

#[test]
fn direction_conditioned_backbone_breaks_invariance() {
    let cfg = ModelConfig {
        dir_in_source_tokens: true,
        ..tiny_config()
    };
    let scene = tiny_scene(1);
    let model = random_model(cfg.clone(), true);
    let (sources, rays) = setup(&scene, &cfg, &[[3.0, 4.0], [8.0, 6.0]]);
    let mut zero = batch_for(&cfg, &scene, &sources, &rays);
    zero.override_directions(DirectionInput::Zeros);
    let mut rand = zero.clone();
    rand.override_directions(DirectionInput::Random(5));
    let a = model.predict(&sources, &zero, true).unwrap();
    let b = model.predict(&sources, &rand, true).unwrap();
    assert!(a.feat.unwrap().max_abs_diff(&b.feat.unwrap()) > 0.0);
}

#[test]
fn identical_rays_give_identical_outputs() {
    let cfg = tiny_config();
    let scene = tiny_scene(2);
    let model = random_model(cfg.clone(), true);
    let (sources, rays) = setup(&scene, &cfg, &[[5.0, 5.0], [5.0, 5.0]]);
    let b = batch_for(&cfg, &scene, &sources, &rays);
    let p = model.predict(&sources, &b, true).unwrap();
    assert_eq!(p.rgb.row(0), p.rgb.row(1));
    let f = p.feat.unwrap();
    assert_eq!(f.row(0), f.row(1));
}

#[test]
fn degenerate_ray_renders_black_and_is_flagged() {
    let cfg = tiny_config();
    let scene = tiny_scene(3);
    let model = random_model(cfg.clone(), true);
    let (sources, _) = setup(&scene, &cfg, &[]);
    // Pointing straight up from above the scene: no source sees any sample.
    let up = Ray {
        origin: Vector3::new(0.0, 0.0, 30.0),
        direction: Vector3::z(),
    };
    let b = batch_for(&cfg, &scene, &sources, &[up]);
    let p = model.predict(&sources, &b, true).unwrap();
    assert_eq!(p.diagnostics.degenerate_rays, vec![true]);
    assert_eq!(p.diagnostics.degenerate_samples, cfg.samples);
    assert_eq!(p.rgb.data(), &[0.0; 3]);
    assert!(p.feat.unwrap().data().iter().all(|v| *v == 0.0));
}

#[test]
fn zero_colour_head_gives_mid_grey() {
    let cfg = tiny_config();
    let scene = tiny_scene(4);
    let mut model = random_model(cfg.clone(), false);
    for name in ["rgb.fc2.w", "rgb.fc2.b"] {
        model.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let (sources, rays) = setup(&scene, &cfg, &[[1.0, 1.0], [9.0, 7.0]]);
    let b = batch_for(&cfg, &scene, &sources, &rays);
    let p = model.predict(&sources, &b, false).unwrap();
    assert!(p.rgb.data().iter().all(|v| *v == 0.5));
}

#[test]
fn colours_stay_inside_the_unit_interval() {
    let cfg = tiny_config();
    let scene = tiny_scene(5);
    for seed in 0..5 {
        let mut model = Model::new(cfg.clone(), seed).unwrap();
        randomize(&mut model.params, seed);
        let (sources, rays) = setup(&scene, &cfg, &[[0.0, 0.0], [15.0, 11.0], [7.5, 6.0]]);
        let b = batch_for(&cfg, &scene, &sources, &rays);
        let p = model.predict(&sources, &b, false).unwrap();
        assert!(p.rgb.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn stage_one_model_cannot_render_features() {
    let cfg = tiny_config();
    let scene = tiny_scene(6);
    let model = random_model(cfg.clone(), false);
    let (sources, rays) = setup(&scene, &cfg, &[[2.0, 2.0]]);
    let b = batch_for(&cfg, &scene, &sources, &rays);
    assert!(matches!(
        model.predict(&sources, &b, true),
        Err(crate::Error::Capability(_))
    ));
    assert!(model.predict(&sources, &b, false).is_ok());
}

#[test]
fn wrong_source_count_is_a_config_error() {
    let cfg = tiny_config();
    let scene = tiny_scene(7);
    let sources = SourceSet::from_scene(&scene, &[0, 1, 2]).unwrap();
    let ray = generate_ray(&scene.views[3].camera, [4.0, 4.0]).unwrap();
    let r = RayBatch::build(
        &cfg,
        &sources,
        &[ray],
        scene.near,
        scene.far,
        Depths::Uniform,
    );
    assert!(matches!(r, Err(crate::Error::Config(_))));
}

/// Runs one backbone view transformer on hand-made tokens.
fn view_out(
    cfg: &ModelConfig,
    params: &Params,
    q: &[f64],
    src: &[f64],
    valid: Vec<bool>,
) -> Vec<f64> {
    let c = cfg.token_dim;
    let n = valid.len();
    let batch = RayBatch {
        rays: 1,
        samples: 1,
        sources: n,
        taps: vec![[(0, 0.0); 4]; n],
        sample_valid: vec![valid.iter().any(|v| *v)],
        ray_valid: vec![true],
        valid,
        pe: Tensor::zeros(&[1, cfg.pe_dim()]),
        dirs: Tensor::zeros(&[n, 4]),
        deltas: vec![1.0],
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let h = g.constant(Tensor::matrix(1, c, q.to_vec()));
    let s = g.constant(Tensor::matrix(n, c, src.to_vec()));
    let mut net = network::Net {
        g: &mut g,
        b: &b,
        cfg,
    };
    let out = net.view_transformer(h, s, &batch, "block0");
    g.value(out).data().to_vec()
}

#[test]
fn view_attention_over_identical_or_single_sources() {
    let cfg = tiny_config();
    let mut params = Params::init_backbone(&cfg, 1);
    randomize(&mut params, 2);
    let c = cfg.token_dim;
    let q: Vec<f64> = (0..c).map(|i| (i as f64 * 0.9).sin()).collect();
    let tok: Vec<f64> = (0..c).map(|i| (i as f64 * 0.4).cos()).collect();
    let junk: Vec<f64> = (0..c).map(|i| 5.0 - i as f64).collect();
    let single = view_out(&cfg, &params, &q, &tok, vec![true]);
    let same: Vec<f64> = tok.iter().chain(&tok).chain(&tok).copied().collect();
    let triple = view_out(&cfg, &params, &q, &same, vec![true, true, true]);
    let masked: Vec<f64> = junk.iter().chain(&tok).chain(&junk).copied().collect();
    let one_valid = view_out(&cfg, &params, &q, &masked, vec![false, true, false]);
    for i in 0..c {
        assert!((single[i] - triple[i]).abs() < 1e-12);
        assert!((single[i] - one_valid[i]).abs() < 1e-12);
    }
    let none = view_out(&cfg, &params, &q, &masked, vec![false, false, false]);
    assert!(none.iter().all(|v| *v == 0.0));
}

/// Runs one backbone ray transformer on hand-made tokens.
fn ray_out(cfg: &ModelConfig, params: &Params, tokens: &[f64], pe: &[f64], m: usize) -> Vec<f64> {
    let c = cfg.token_dim;
    let batch = RayBatch {
        rays: 1,
        samples: m,
        sources: 1,
        taps: vec![],
        valid: vec![],
        sample_valid: vec![true; m],
        ray_valid: vec![true],
        pe: Tensor::matrix(m, cfg.pe_dim(), pe.to_vec()),
        dirs: Tensor::zeros(&[m, 4]),
        deltas: vec![1.0; m],
    };
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let h = g.constant(Tensor::matrix(m, c, tokens.to_vec()));
    let p = g.constant(batch.pe.clone());
    let mut net = network::Net {
        g: &mut g,
        b: &b,
        cfg,
    };
    let out = net.ray_transformer(h, p, &batch, "block0");
    g.value(out).data().to_vec()
}

#[test]
fn ray_attention_is_permutation_equivariant() {
    let cfg = tiny_config();
    let mut params = Params::init_backbone(&cfg, 5);
    randomize(&mut params, 6);
    let (c, pd, m) = (cfg.token_dim, cfg.pe_dim(), 3);
    let tokens: Vec<f64> = (0..m * c).map(|i| (i as f64 * 0.77).sin()).collect();
    let pe: Vec<f64> = (0..m * pd).map(|i| (i as f64 * 0.31).cos()).collect();
    let out = ray_out(&cfg, &params, &tokens, &pe, m);
    let perm = [2usize, 0, 1];
    let pt: Vec<f64> = perm
        .iter()
        .flat_map(|r| tokens[r * c..(r + 1) * c].to_vec())
        .collect();
    let pp: Vec<f64> = perm
        .iter()
        .flat_map(|r| pe[r * pd..(r + 1) * pd].to_vec())
        .collect();
    let pout = ray_out(&cfg, &params, &pt, &pp, m);
    for (k, r) in perm.iter().enumerate() {
        for j in 0..c {
            assert!((pout[k * c + j] - out[r * c + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_sample_ray_reduces_to_value_projection() {
    let cfg = tiny_config();
    let mut params = Params::init_backbone(&cfg, 7);
    randomize(&mut params, 8);
    let (c, pd) = (cfg.token_dim, cfg.pe_dim());
    let h: Vec<f64> = (0..c).map(|i| (i as f64).sin()).collect();
    let pe: Vec<f64> = (0..pd).map(|i| (i as f64 * 0.2).cos()).collect();
    let got = ray_out(&cfg, &params, &h, &pe, 1);
    // One key means softmax weight 1: attention is LN(r) Wv Wo + bo.
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let hv = g.constant(Tensor::matrix(1, c, h));
    let pv = g.constant(Tensor::matrix(1, pd, pe));
    let mut net = network::Net {
        g: &mut g,
        b: &b,
        cfg: &cfg,
    };
    let w = net.b.var("block0.ray.pe");
    let e = net.g.matmul(pv, w);
    let r = net.g.add(hv, e);
    let rn = net.norm(r, "block0.ray.ln");
    let wv = net.b.var("block0.ray.attn.wv");
    let v = net.g.matmul(rn, wv);
    let a = net.linear(v, "block0.ray.attn.out");
    let r = net.g.add(r, a);
    let n = net.norm(r, "block0.ray.ff.ln");
    let f = net.linear(n, "block0.ray.ff.fc1");
    let f = net.g.gelu(f);
    let f = net.linear(f, "block0.ray.ff.fc2");
    let out = net.g.add(r, f);
    let want = g.value(out).data().to_vec();
    for (x, y) in got.iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn volumetric_readout_transparent_and_opaque_limits() {
    let cfg = ModelConfig {
        readout: Readout::Volumetric,
        ..tiny_config()
    };
    let scene = tiny_scene(8);
    let mut model = random_model(cfg.clone(), false);
    let (sources, rays) = setup(&scene, &cfg, &[[4.0, 4.0], [10.0, 8.0]]);
    let b = batch_for(&cfg, &scene, &sources, &rays);
    model
        .params
        .get_mut("vol.sigma.w")
        .unwrap()
        .data_mut()
        .fill(0.0);
    model
        .params
        .get_mut("vol.sigma.b")
        .unwrap()
        .data_mut()
        .fill(-60.0);
    let p = model.predict(&sources, &b, false).unwrap();
    assert!(p.rgb.data().iter().all(|v| v.abs() < 1e-20));
    model
        .params
        .get_mut("vol.sigma.b")
        .unwrap()
        .data_mut()
        .fill(60.0);
    let p = model.predict(&sources, &b, false).unwrap();
    // Every sample is opaque, so the first one wins; recompute its colour.
    let mut g = Graph::new();
    let bind = model.params.bind(&mut g, false);
    let out = forward(&mut g, &bind, &cfg, &sources, &b, false).unwrap();
    let toks = g.value(out.tokens).clone();
    let first: Vec<usize> = (0..b.rays).map(|r| r * cfg.samples).collect();
    let mut g2 = Graph::new();
    let bind2 = model.params.bind(&mut g2, false);
    let rows: Vec<f64> = first.iter().flat_map(|r| toks.row(*r).to_vec()).collect();
    let t = g2.constant(Tensor::matrix(first.len(), cfg.token_dim, rows));
    let gamma = bind2.var("out_ln.g");
    let beta = bind2.var("out_ln.b");
    let t = g2.layer_norm(t, gamma, beta);
    let dirs: Vec<f64> = first
        .iter()
        .flat_map(|r| b.dirs.data()[r * cfg.sources * 4..(r + 1) * cfg.sources * 4].to_vec())
        .collect();
    let d = g2.constant(Tensor::matrix(first.len(), 4 * cfg.sources, dirs));
    let x = g2.concat(&[t, d]);
    let w1 = bind2.var("vol.fc1.w");
    let b1 = bind2.var("vol.fc1.b");
    let y = g2.matmul(x, w1);
    let y = g2.add_row(y, b1);
    let y = g2.gelu(y);
    let w2 = bind2.var("vol.fc2.w");
    let b2 = bind2.var("vol.fc2.b");
    let y = g2.matmul(y, w2);
    let y = g2.add_row(y, b2);
    let c1 = g2.sigmoid(y);
    assert!(g2.value(c1).max_abs_diff(&p.rgb) < 1e-3);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut ck = Checkpoint::new(Stage::Two, random_model(cfg, true), 42, 17);
    let mut m = Params::default();
    m.insert("src.w", Tensor::matrix(1, 2, vec![1.5, -0.25]));
    ck.optimizer = Some(OptimizerState {
        step: 17,
        m: m.clone(),
        v: m,
    });
    let path = dir.path().join("a.gsnc");
    write_checkpoint(&ck, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
}

#[test]
fn checkpoint_stage_must_match_its_parameters() {
    let cfg = tiny_config();
    let with_head = random_model(cfg.clone(), true);
    assert!(Checkpoint::new(Stage::One, with_head.clone(), 0, 0)
        .validate()
        .is_err());
    assert!(Checkpoint::new(Stage::Two, with_head, 0, 0)
        .validate()
        .is_ok());
    let bare = random_model(cfg, false);
    assert!(Checkpoint::new(Stage::One, bare.clone(), 0, 0)
        .validate()
        .is_ok());
    assert!(Checkpoint::new(Stage::Two, bare, 0, 0).validate().is_err());
}

#[test]
fn corrupt_checkpoints_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoint::new(Stage::One, random_model(tiny_config(), false), 1, 0);
    let path = dir.path().join("c.gsnc");
    write_checkpoint(&ck, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(
        read_checkpoint(&path),
        Err(crate::Error::Format { .. })
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(
        read_checkpoint(&path),
        Err(crate::Error::Format { .. })
    ));
}

#[test]
fn rendering_produces_full_images() {
    let cfg = tiny_config();
    let scene = tiny_scene(9);
    let model = random_model(cfg.clone(), true);
    let cam = scene.views[1].camera.clone();
    let sources = select_source_views(&scene, &cam, cfg.sources).unwrap();
    let req = RenderRequest {
        camera: cam,
        sources,
        features: true,
        chunk: 37,
        directions: DirectionInput::Computed,
    };
    let r = render_view(&model, &scene, &req).unwrap();
    assert_eq!(r.rgb.len(), 16 * 12 * 3);
    let f = r.feat.unwrap();
    assert_eq!((f.width, f.height, f.dim), (16, 12, 4));
    let r2 = render_view(&model, &scene, &RenderRequest { chunk: 200, ..req }).unwrap();
    assert_eq!(r2.rgb, r.rgb);
}
