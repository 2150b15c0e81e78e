use super::config::AdamConfig;
use crate::model::{OptimizerState, Params};
use crate::tensor::Tensor;

/// Adam with per-parameter learning rates.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Params::default(),
            v: Params::default(),
        }
    }

    pub fn from_state(config: AdamConfig, state: OptimizerState) -> Self {
        Self {
            config,
            step: state.step,
            m: state.m,
            v: state.v,
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// One bias-corrected update; `lr` maps a parameter name to its rate.
    pub fn update(&mut self, params: &mut Params, grads: &Params, lr: impl Fn(&str) -> f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Tensor::zeros(p.shape()));
                self.v.insert(name.clone(), Tensor::zeros(p.shape()));
            }
            let m = self.m.get_mut(name).unwrap().data_mut();
            let rate = lr(name);
            let v = self.v.get_mut(name).unwrap().data_mut();
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
