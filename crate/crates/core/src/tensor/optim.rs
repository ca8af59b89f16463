//! ADAM and Nesterov-momentum SGD over flat parameter buffers.

use crate::error::{Error, Result};

/// ADAM moment buffers and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// `sizes` are the element counts of the parameters, in step order.
    pub fn new(lr: f64, beta1: f64, beta2: f64, epsilon: f64, sizes: &[usize]) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::config(format!(
                "adam betas must lie in [0, 1), got ({beta1}, {beta2})"
            )));
        }
        Ok(AdamState {
            lr,
            beta1,
            beta2,
            epsilon,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub(crate) fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
        t: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    ) -> Self {
        AdamState { lr, beta1, beta2, epsilon, t, m, v }
    }

    pub(crate) fn parts(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.t, &self.m, &self.v)
    }
}

/// One bias-corrected ADAM update; increments the step counter exactly once.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::config(format!(
            "adam_step: {} params, {} grads, {} state buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::config(format!(
                "adam_step: buffer length mismatch ({} vs {} vs {})",
                p.len(),
                g.len(),
                m.len()
            )));
        }
        for i in 0..p.len() {
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// SGD velocity buffers and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(lr: f64, momentum: f64, nesterov: bool, sizes: &[usize]) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!(
                "sgd momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(SgdState {
            lr,
            momentum,
            nesterov,
            velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub(crate) fn from_parts(lr: f64, momentum: f64, nesterov: bool, velocity: Vec<Vec<f64>>) -> Self {
        SgdState { lr, momentum, nesterov, velocity }
    }

    pub(crate) fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// One momentum SGD update. Nesterov: v ← μ·v + g, p ← p − lr·(g + μ·v);
/// plain momentum: v ← μ·v + g, p ← p − lr·v.
pub fn sgd_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut SgdState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::config(format!(
            "sgd_step: {} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let mu = state.momentum;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::config(format!(
                "sgd_step: buffer length mismatch ({} vs {} vs {})",
                p.len(),
                g.len(),
                v.len()
            )));
        }
        for i in 0..p.len() {
            v[i] = mu * v[i] + g[i];
            if state.nesterov {
                p[i] -= state.lr * (g[i] + mu * v[i]);
            } else {
                p[i] -= state.lr * v[i];
            }
        }
    }
    Ok(())
}
