//! Forward pass on the autodiff tape.
//!
//! Layout conventions: a batch has `R` rays with `M` samples each and `N`
//! source views. Sample tokens are rows `r*M + m`; source tokens for a sample
//! are rows `(r*M + m)*N + n`. Source grids are stacked `[N*H*W, channels]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{positional_encoding, ModelConfig, Readout};
use super::params::{Binding, Params};
use crate::autodiff::{Graph, Taps, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_taps, deltas_for, project, relative_direction_encoding, stratified_depths,
    uniform_depths, Camera, Ray,
};
use crate::scene::Scene;
use crate::tensor::Tensor;

const EMPTY_TAPS: Taps = [(0, 0.0); 4];

/// The posed source images (and optionally teacher features) a batch reads.
#[derive(Clone, Debug)]
pub struct SourceSet {
    pub cameras: Vec<Camera>,
    pub width: usize,
    pub height: usize,
    /// `[N*H*W, 3]`.
    pub rgb: Tensor,
    /// `[N*H*W, D_feat]`, when the scene carries teacher features.
    pub teacher: Option<Tensor>,
}

impl SourceSet {
    pub fn from_scene(scene: &Scene, indices: &[usize]) -> Result<Self> {
        let (w, h) = (scene.width(), scene.height());
        let mut rgb = Vec::with_capacity(indices.len() * w * h * 3);
        let mut cameras = Vec::with_capacity(indices.len());
        for &i in indices {
            let v = scene
                .views
                .get(i)
                .ok_or_else(|| Error::domain(format!("scene {} has no view {i}", scene.id)))?;
            rgb.extend_from_slice(&v.rgb.data);
            cameras.push(v.camera.clone());
        }
        let teacher = scene.teacher_features.as_ref().map(|fs| {
            let d = fs[0].dim;
            let mut data = Vec::with_capacity(indices.len() * w * h * d);
            for &i in indices {
                data.extend_from_slice(&fs[i].data);
            }
            Tensor::matrix(indices.len() * w * h, d, data)
        });
        Ok(Self {
            cameras,
            width: w,
            height: h,
            rgb: Tensor::matrix(indices.len() * w * h, 3, rgb),
            teacher,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Depth placement along each ray.
pub enum Depths<'a> {
    Uniform,
    Stratified(&'a mut ChaCha8Rng),
}

/// What the direction-dependent inputs are replaced with, if anything.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DirectionInput {
    Computed,
    Zeros,
    Random(u64),
}

/// Everything geometric about a batch of rays, precomputed off the tape.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub rays: usize,
    pub samples: usize,
    pub sources: usize,
    pub taps: Vec<Taps>,
    pub valid: Vec<bool>,
    /// At least one source sees the sample.
    pub sample_valid: Vec<bool>,
    /// At least one sample of the ray is seen by some source.
    pub ray_valid: Vec<bool>,
    /// `[R*M, pe_dim]`.
    pub pe: Tensor,
    /// `[R*M*N, 4]` relative direction encodings.
    pub dirs: Tensor,
    pub deltas: Vec<f64>,
}

impl RayBatch {
    pub fn build(
        cfg: &ModelConfig,
        sources: &SourceSet,
        rays: &[Ray],
        near: f64,
        far: f64,
        mut depths: Depths<'_>,
    ) -> Result<Self> {
        let (m, n) = (cfg.samples, cfg.sources);
        if sources.len() != n {
            return Err(Error::config(format!(
                "model expects {n} source views, got {}",
                sources.len()
            )));
        }
        let r = rays.len();
        let hw = sources.width * sources.height;
        let mut taps = Vec::with_capacity(r * m * n);
        let mut valid = Vec::with_capacity(r * m * n);
        let mut sample_valid = Vec::with_capacity(r * m);
        let mut ray_valid = Vec::with_capacity(r);
        let mut pe = Vec::with_capacity(r * m * cfg.pe_dim());
        let mut dirs = Vec::with_capacity(r * m * n * 4);
        let mut deltas = Vec::with_capacity(r * m);
        for ray in rays {
            let t = match &mut depths {
                Depths::Uniform if m == 1 => vec![0.5 * (near + far)],
                Depths::Uniform => uniform_depths(near, far, m)?,
                Depths::Stratified(rng) => {
                    stratified_depths(near, far, m.max(2), *rng)?[..m].to_vec()
                }
            };
            deltas.extend(deltas_for(&t, near, far));
            let mut any_ray = false;
            for &tj in &t {
                let x = ray.at(tj);
                positional_encoding([x.x, x.y, x.z], cfg.pe_freqs, &mut pe);
                let mut any = false;
                for (i, cam) in sources.cameras.iter().enumerate() {
                    let p = project(cam, &x);
                    let tp = if p.valid {
                        bilinear_taps(sources.width, sources.height, p.z, i * hw)
                    } else {
                        None
                    };
                    valid.push(tp.is_some());
                    any |= tp.is_some();
                    taps.push(tp.unwrap_or(EMPTY_TAPS));
                    dirs.extend(relative_direction_encoding(ray, cam, &x).values);
                }
                sample_valid.push(any);
                any_ray |= any;
            }
            ray_valid.push(any_ray);
        }
        Ok(Self {
            rays: r,
            samples: m,
            sources: n,
            taps,
            valid,
            sample_valid,
            ray_valid,
            pe: Tensor::matrix(r * m, cfg.pe_dim(), pe),
            dirs: Tensor::matrix(r * m * n, 4, dirs),
            deltas,
        })
    }

    pub fn override_directions(&mut self, input: DirectionInput) {
        match input {
            DirectionInput::Computed => {}
            DirectionInput::Zeros => self.dirs.data_mut().fill(0.0),
            DirectionInput::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for v in self.dirs.data_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
            }
        }
    }

    pub fn degenerate_samples(&self) -> usize {
        self.sample_valid.iter().filter(|v| !**v).count()
    }

    /// Per-source mean of the direction encoding over each ray's samples,
    /// `[R, 4N]`.
    pub fn direction_summary(&self) -> Tensor {
        let (m, n) = (self.samples, self.sources);
        let mut out = vec![0.0; self.rays * 4 * n];
        for r in 0..self.rays {
            for s in 0..m {
                for i in 0..n {
                    let src = self.dirs.row((r * m + s) * n + i);
                    for c in 0..4 {
                        out[r * 4 * n + i * 4 + c] += src[c] / m as f64;
                    }
                }
            }
        }
        Tensor::matrix(self.rays, 4 * n, out)
    }

    fn mask_column(&self) -> Tensor {
        let v = self
            .valid
            .iter()
            .map(|b| if *b { 1.0 } else { 0.0 })
            .collect();
        Tensor::matrix(self.valid.len(), 1, v)
    }

    fn mean_weights(&self) -> Vec<f64> {
        let n = self.sources;
        let mut w = Vec::with_capacity(self.valid.len());
        for chunk in self.valid.chunks(n) {
            let count = chunk.iter().filter(|v| **v).count();
            for v in chunk {
                w.push(if *v { 1.0 / count as f64 } else { 0.0 });
            }
        }
        w
    }
}

fn flags(v: &[bool]) -> Vec<f64> {
    v.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect()
}

/// Tape-level building blocks shared by the backbone and the feature head.
pub(crate) struct Net<'a> {
    pub g: &'a mut Graph,
    pub b: &'a Binding,
    pub cfg: &'a ModelConfig,
}

impl Net<'_> {
    fn p(&self, name: &str) -> Var {
        self.b.var(name)
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let bias = self.p(&format!("{name}.b"));
        let y = self.g.matmul(x, w);
        self.g.add_row(y, bias)
    }

    pub fn norm(&mut self, x: Var, name: &str) -> Var {
        let gamma = self.p(&format!("{name}.g"));
        let beta = self.p(&format!("{name}.b"));
        self.g.layer_norm(x, gamma, beta)
    }

    fn feed_forward(&mut self, x: Var, name: &str) -> Var {
        let n = self.norm(x, &format!("{name}.ln"));
        let h = self.linear(n, &format!("{name}.fc1"));
        let h = self.g.gelu(h);
        let y = self.linear(h, &format!("{name}.fc2"));
        self.g.add(x, y)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &mut self,
        qn: Var,
        kvn: Var,
        name: &str,
        groups: usize,
        lq: usize,
        lk: usize,
        mask: Option<&[bool]>,
    ) -> Var {
        let wq = self.p(&format!("{name}.wq"));
        let wk = self.p(&format!("{name}.wk"));
        let wv = self.p(&format!("{name}.wv"));
        let q = self.g.matmul(qn, wq);
        let k = self.g.matmul(kvn, wk);
        let v = self.g.matmul(kvn, wv);
        let a = self
            .g
            .attention(q, k, v, groups, lq, lk, self.cfg.heads, mask);
        self.linear(a, &format!("{name}.out"))
    }

    /// Cross-attention of each sample token over its source tokens, then a
    /// feed-forward layer. Samples no source sees come out as zero tokens.
    pub fn view_transformer(&mut self, h: Var, src: Var, batch: &RayBatch, prefix: &str) -> Var {
        let qn = self.norm(h, &format!("{prefix}.view.ln_q"));
        let kvn = self.norm(src, &format!("{prefix}.view.ln_kv"));
        let groups = batch.rays * batch.samples;
        let a = self.attend(
            qn,
            kvn,
            &format!("{prefix}.view.attn"),
            groups,
            1,
            batch.sources,
            Some(&batch.valid),
        );
        let h = self.g.add(h, a);
        let h = self.feed_forward(h, &format!("{prefix}.view.ff"));
        self.g.row_scale(h, flags(&batch.sample_valid))
    }

    /// Self-attention across the samples of each ray. Inputs are the sample
    /// tokens and the positional encoding of the sample positions only.
    pub fn ray_transformer(&mut self, h: Var, pe: Var, batch: &RayBatch, prefix: &str) -> Var {
        let w = self.p(&format!("{prefix}.ray.pe"));
        let e = self.g.matmul(pe, w);
        let r = self.g.add(h, e);
        let rn = self.norm(r, &format!("{prefix}.ray.ln"));
        let m = batch.samples;
        let a = self.attend(
            rn,
            rn,
            &format!("{prefix}.ray.attn"),
            batch.rays,
            m,
            m,
            None,
        );
        let r = self.g.add(r, a);
        self.feed_forward(r, &format!("{prefix}.ray.ff"))
    }

    pub fn block(&mut self, h: Var, src: Var, pe: Var, batch: &RayBatch, prefix: &str) -> Var {
        let h = self.view_transformer(h, src, batch, prefix);
        self.ray_transformer(h, pe, batch, prefix)
    }
}

/// Tape handles produced by [`forward`].
pub struct Outputs {
    /// `[R, 3]` colours in `[0, 1]`.
    pub rgb: Var,
    /// `[R, D_feat]`, when the feature path ran.
    pub feat: Option<Var>,
    /// `[R*M, C]` backbone tokens after the last block.
    pub tokens: Var,
}

/// Builds the full network on the tape.
pub fn forward(
    g: &mut Graph,
    b: &Binding,
    cfg: &ModelConfig,
    sources: &SourceSet,
    batch: &RayBatch,
    with_features: bool,
) -> Result<Outputs> {
    let (hgt, wid) = (sources.height, sources.width);
    if batch.sources != cfg.sources || batch.samples != cfg.samples {
        return Err(Error::config(
            "ray batch does not match the model configuration",
        ));
    }
    let mut net = Net { g, b, cfg };

    // Source encoder: two 3x3 convolutions over every source image.
    let img = net.g.constant(sources.rgb.clone());
    let cols = net.g.im2col3x3(img, hgt, wid);
    let f = net.linear(cols, "enc.conv1");
    let f = net.g.gelu(f);
    let cols = net.g.im2col3x3(f, hgt, wid);
    let f = net.linear(cols, "enc.conv2");
    let grid = net.g.concat(&[img, f]);

    let sampled = net.g.gather(grid, batch.taps.clone());
    let mask = net.g.constant(batch.mask_column());
    let mut parts = vec![sampled, mask];
    if cfg.dir_in_source_tokens {
        parts.push(net.g.constant(batch.dirs.clone()));
    }
    let src_in = net.g.concat(&parts);
    let src = net.linear(src_in, "src");
    let pe = net.g.constant(batch.pe.clone());

    // Initial sample token from the masked mean and variance of the raw
    // epipolar reads; agreement across sources marks surface points.
    let w = batch.mean_weights();
    let mean = net.g.group_sum(sampled, batch.sources, w.clone());
    let rep = net.g.repeat_rows(mean, batch.sources);
    let dev = net.g.sub(sampled, rep);
    let sq = net.g.mul(dev, dev);
    let var = net.g.group_sum(sq, batch.sources, w);
    let stats = net.g.concat(&[mean, var]);
    let mut h = net.linear(stats, "init");
    for i in 0..cfg.blocks {
        h = net.block(h, src, pe, batch, &format!("block{i}"));
    }
    let tokens = h;
    let ray_flags = flags(&batch.ray_valid);
    let t = net.norm(h, "out_ln");

    let rgb = match cfg.readout {
        Readout::RayTransformer => {
            let pooled = net.g.group_mean(t, batch.samples);
            let d = net.g.constant(batch.direction_summary());
            let x = net.g.concat(&[pooled, d]);
            let y = net.linear(x, "rgb.fc1");
            let y = net.g.gelu(y);
            let y = net.linear(y, "rgb.fc2");
            net.g.sigmoid(y)
        }
        Readout::Volumetric => {
            let s = net.linear(t, "vol.sigma");
            let sigma = net.g.softplus(s);
            let per_sample = batch
                .dirs
                .clone()
                .reshaped(vec![batch.rays * batch.samples, 4 * batch.sources]);
            let d = net.g.constant(per_sample);
            let x = net.g.concat(&[t, d]);
            let y = net.linear(x, "vol.fc1");
            let y = net.g.gelu(y);
            let y = net.linear(y, "vol.fc2");
            let c = net.g.sigmoid(y);
            net.g
                .composite(sigma, c, batch.samples, batch.deltas.clone())
        }
    };
    let rgb = net.g.row_scale(rgb, ray_flags.clone());

    let feat = if with_features {
        let teacher = sources.teacher.as_ref().ok_or_else(|| {
            Error::config("feature rendering needs teacher features on the source views")
        })?;
        if teacher.cols() != cfg.feat_dim {
            return Err(Error::config(format!(
                "teacher features have {} channels, model expects {}",
                teacher.cols(),
                cfg.feat_dim
            )));
        }
        let tv = net.g.constant(teacher.clone());
        let sampled = net.g.gather(tv, batch.taps.clone());
        let x = net.g.concat(&[sampled, mask]);
        let src2 = net.linear(x, "feat.src");
        let mut h2 = tokens;
        for j in 0..cfg.stage2_blocks {
            h2 = net.block(h2, src2, pe, batch, &format!("feat.block{j}"));
        }
        let t2 = net.norm(h2, "feat.out_ln");
        let x = net.g.concat(&[t2, pe]);
        let y = match cfg.readout {
            Readout::RayTransformer => {
                let pooled = net.g.group_mean(x, batch.samples);
                net.linear(pooled, "feat.out")
            }
            Readout::Volumetric => {
                let s = net.linear(t2, "feat.sigma");
                let sigma = net.g.softplus(s);
                let c = net.linear(x, "feat.out");
                net.g
                    .composite(sigma, c, batch.samples, batch.deltas.clone())
            }
        };
        Some(net.g.row_scale(y, ray_flags))
    } else {
        None
    };
    Ok(Outputs { rgb, feat, tokens })
}

/// Per-ray results of an inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `[R, 3]`.
    pub rgb: Tensor,
    /// `[R, D_feat]`.
    pub feat: Option<Tensor>,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub degenerate_samples: usize,
    /// Rays no source sees at any sample; their outputs are zero.
    pub degenerate_rays: Vec<bool>,
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init_backbone(&config, seed);
        Ok(Self { config, params })
    }

    pub fn add_feature_head(&mut self, seed: u64) {
        self.params
            .merge(Params::init_feature_head(&self.config, seed));
    }

    pub fn has_feature_head(&self) -> bool {
        self.params.has_feature_head()
    }

    pub fn predict(
        &self,
        sources: &SourceSet,
        batch: &RayBatch,
        with_features: bool,
    ) -> Result<Prediction> {
        if with_features && !self.has_feature_head() {
            return Err(Error::Capability("model has no feature head".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let out = forward(&mut g, &b, &self.config, sources, batch, with_features)?;
        Ok(Prediction {
            rgb: g.value(out.rgb).clone(),
            feat: out.feat.map(|f| g.value(f).clone()),
            diagnostics: Diagnostics {
                degenerate_samples: batch.degenerate_samples(),
                degenerate_rays: batch.ray_valid.iter().map(|v| !v).collect(),
            },
        })
    }
}
