use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::array::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter array.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Arc<Array>]) -> Self {
        let zeros = |p: &Arc<Array>| Array::zeros(p.shape());
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }
}

/// One bias-corrected Adam update. A missing gradient counts as zero.
pub fn adam_step(
    params: &mut [Arc<Array>],
    grads: &[Option<Array>],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        match &grads[k] {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "adam: gradient {:?} for parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                for ((mi, vi), gi) in m.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                }
            }
            None => {
                m.data_mut().iter_mut().for_each(|x| *x *= beta1);
                v.data_mut().iter_mut().for_each(|x| *x *= beta2);
            }
        }
        if m.data().iter().all(|&x| x == 0.0) {
            continue;
        }
        let p = Arc::make_mut(p);
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
