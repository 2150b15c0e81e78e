use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Readout};
use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Prefix shared by every feature-head parameter.
pub const FEATURE_PREFIX: &str = "feat.";

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    Fan(usize),
    Zeros,
    Ones,
}

struct Builder<'a> {
    out: &'a mut Params,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Fan(fan_in) => {
                let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        self.out
            .tensors
            .insert(name, Tensor::new(shape.to_vec(), data));
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.add(format!("{name}.w"), &[fan_in, fan_out], Init::Fan(fan_in));
        self.add(format!("{name}.b"), &[fan_out], Init::Zeros);
    }

    fn norm(&mut self, name: &str, dim: usize) {
        self.add(format!("{name}.g"), &[dim], Init::Ones);
        self.add(format!("{name}.b"), &[dim], Init::Zeros);
    }

    fn attention(&mut self, name: &str, c: usize) {
        for w in ["wq", "wk", "wv"] {
            self.add(format!("{name}.{w}"), &[c, c], Init::Fan(c));
        }
        self.add(format!("{name}.out.w"), &[c, c], Init::Zeros);
        self.add(format!("{name}.out.b"), &[c], Init::Zeros);
    }

    fn feed_forward(&mut self, name: &str, c: usize, hidden: usize) {
        self.norm(&format!("{name}.ln"), c);
        self.linear(&format!("{name}.fc1"), c, hidden);
        self.add(format!("{name}.fc2.w"), &[hidden, c], Init::Zeros);
        self.add(format!("{name}.fc2.b"), &[c], Init::Zeros);
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig) {
        let c = cfg.token_dim;
        self.norm(&format!("{prefix}.view.ln_q"), c);
        self.norm(&format!("{prefix}.view.ln_kv"), c);
        self.attention(&format!("{prefix}.view.attn"), c);
        self.feed_forward(&format!("{prefix}.view.ff"), c, cfg.mlp_hidden);
        self.add(
            format!("{prefix}.ray.pe"),
            &[cfg.pe_dim(), c],
            Init::Fan(cfg.pe_dim()),
        );
        self.norm(&format!("{prefix}.ray.ln"), c);
        self.attention(&format!("{prefix}.ray.attn"), c);
        self.feed_forward(&format!("{prefix}.ray.ff"), c, cfg.mlp_hidden);
    }
}

impl Params {
    /// Fresh backbone and colour head.
    pub fn init_backbone(cfg: &ModelConfig, seed: u64) -> Params {
        let mut p = Params::default();
        let mut b = Builder {
            out: &mut p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let (c, d) = (cfg.token_dim, cfg.img_dim);
        b.linear("enc.conv1", 27, d);
        b.linear("enc.conv2", 9 * d, d);
        b.linear("src", cfg.source_in_dim(), c);
        b.linear("init", 2 * (3 + d), c);
        for i in 0..cfg.blocks {
            b.block(&format!("block{i}"), cfg);
        }
        b.norm("out_ln", c);
        match cfg.readout {
            Readout::RayTransformer => {
                b.linear("rgb.fc1", c + cfg.dir_dim(), cfg.mlp_hidden);
                b.linear("rgb.fc2", cfg.mlp_hidden, 3);
            }
            Readout::Volumetric => {
                b.linear("vol.sigma", c, 1);
                b.linear("vol.fc1", c + cfg.dir_dim(), cfg.mlp_hidden);
                b.linear("vol.fc2", cfg.mlp_hidden, 3);
            }
        }
        p
    }

    /// Fresh feature head, to be merged into a trained backbone.
    pub fn init_feature_head(cfg: &ModelConfig, seed: u64) -> Params {
        let mut p = Params::default();
        let mut b = Builder {
            out: &mut p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = cfg.token_dim;
        b.linear("feat.src", cfg.feat_dim + 1, c);
        for j in 0..cfg.stage2_blocks {
            b.block(&format!("feat.block{j}"), cfg);
        }
        b.norm("feat.out_ln", c);
        b.add(
            "feat.out.w".into(),
            &[c + cfg.pe_dim(), cfg.feat_dim],
            Init::Zeros,
        );
        b.add("feat.out.b".into(), &[cfg.feat_dim], Init::Zeros);
        if cfg.readout == Readout::Volumetric {
            b.linear("feat.sigma", c, 1);
        }
        p
    }

    pub fn merge(&mut self, other: Params) {
        self.tensors.extend(other.tensors);
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn has_feature_head(&self) -> bool {
        self.tensors.keys().any(|k| k.starts_with(FEATURE_PREFIX))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Puts every tensor on the tape, as trainable variables or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Binding { vars }
    }
}

/// Tape handles for a bound [`Params`].
pub struct Binding {
    vars: HashMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Gradient per parameter; parameters the loss does not touch get zeros.
    pub fn collect(&self, params: &Params, grads: &Gradients) -> Params {
        let mut out = Params::default();
        for (name, t) in params.iter() {
            let g = grads
                .get(self.var(name))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}
