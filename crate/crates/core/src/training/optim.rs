use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("invalid learning rate {}", self.lr)));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::config(format!("beta {b} must lie in (0, 1)")));
            }
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::config("eps must be positive and weight decay non-negative"));
        }
        Ok(())
    }
}

/// Moment buffers in parameter order plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &Parameters<T>) -> Self {
        let zeros = || -> Vec<Tensor<T>> {
            params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Decoupled weight decay (matrices and kernels only, not biases or norm
/// gains), then a bias-corrected Adam step.
pub fn adamw_step<T: Real>(
    params: &mut Parameters<T>,
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::config(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for (k, (path, p)) in params.iter_mut().enumerate() {
        let g = &grads[k];
        if g.shape() != p.shape() {
            return Err(Error::shape(format!("gradient shape mismatch for {path}")));
        }
        let decay = if p.ndim() >= 2 {
            T::one() - lr * T::lit(cfg.weight_decay)
        } else {
            T::one()
        };
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *pv *= decay;
            m[i] = b1 * m[i] + (T::one() - b1) * gv;
            v[i] = b2 * v[i] + (T::one() - b2) * gv * gv;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
        if let Some(i) = p.first_non_finite() {
            return Err(Error::numeric(path.clone(), format!("non-finite parameter at {i} after update")));
        }
    }
    Ok(())
}
