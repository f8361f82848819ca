//! Adam with bias correction. Each parameter keeps its own step count, so a
//! parameter that received no gradient in a step is left untouched and its
//! moments do not decay.

use crate::autodiff::Tensor;
use crate::models::{ParamGrads, ParamStore};

use super::TrainError;

/// Rejects gradients with a wrong shape or any non-finite entry.
pub fn check_gradients(params: &ParamStore, grads: &ParamGrads) -> Result<(), TrainError> {
    for (i, g) in grads.iter() {
        let shape = params.tensor_at(i).shape();
        if g.shape() != shape {
            return Err(TrainError::GradientShape {
                param: params.names()[i].clone(),
                expected: shape.to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: params.names()[i].clone(),
                index: pos,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    steps: u32,
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: Vec::new(),
        }
    }

    /// Number of updates applied to parameter `index`.
    pub fn steps(&self, index: usize) -> u32 {
        self.state
            .get(index)
            .and_then(Option::as_ref)
            .map_or(0, |s| s.steps)
    }

    /// Updates every parameter that has a gradient. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamGrads,
        lr: f64,
    ) -> Result<(), TrainError> {
        check_gradients(params, grads)?;
        if self.state.len() < params.len() {
            self.state.resize(params.len(), None);
        }
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (i, g) in grads.iter() {
            let p = params.tensor_at_mut(i);
            let st = self.state[i].get_or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - beta1.powi(st.steps as i32);
            let c2 = 1.0 - beta2.powi(st.steps as i32);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((w, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let m_hat = *mk / c1;
                let v_hat = *vk / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
