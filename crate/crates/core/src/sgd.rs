//! Momentum SGD with L2 weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    /// One velocity per parameter tensor, same shapes.
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        })
    }
}

/// `v <- momentum*v - lr*(grad + wd*param)`, `param <- param + v`.
///
/// Returns fresh parameters and state; inputs are left untouched.
pub fn sgd_step(
    params: &[Tensor],
    grads: &[Tensor],
    state: &SgdState,
) -> Result<(Vec<Tensor>, SgdState)> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::shape(format!(
            "sgd_step: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay: wd,
    } = state.config;
    let mut new_params = Vec::with_capacity(params.len());
    let mut new_velocity = Vec::with_capacity(params.len());
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "sgd_step: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        let mut nv = v.clone();
        let mut np = p.clone();
        for (((npv, nvv), &gv), &pv) in np
            .data_mut()
            .iter_mut()
            .zip(nv.data_mut().iter_mut())
            .zip(g.data())
            .zip(p.data())
        {
            *nvv = momentum * *nvv - lr * (gv + wd * pv);
            *npv = pv + *nvv;
        }
        new_params.push(np);
        new_velocity.push(nv);
    }
    Ok((
        new_params,
        SgdState {
            config: state.config,
            velocity: new_velocity,
        },
    ))
}
