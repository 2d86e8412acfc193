//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor, plus
/// the number of updates taken so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like<'a>(shapes: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = shapes
            .into_iter()
            .map(|t| (Tensor::zeros(t.shape()), Tensor::zeros(t.shape())))
            .unzip();
        AdamState { m, v, step: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, state: AdamState) -> Self {
        Adam { config, state }
    }

    /// One update. `grads[i]` of `None` counts as a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) -> Result<()> {
        if params.len() != self.state.m.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam holds {} moments, got {} params and {} grads",
                self.state.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if p.shape() != self.state.m[i].shape() {
                return Err(Error::shape("adam", p.shape(), self.state.m[i].shape()));
            }
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let g = grads[i].map(Tensor::data);
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
