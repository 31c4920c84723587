use super::Matrix;
use crate::error::{Error, Result};
use crate::topology::ConnectivityMask;
use serde::{Deserialize, Serialize};

/// Adam hyperparameters. The paper fixes only the learning rate; the moment
/// decay rates and epsilon are the standard ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f32) -> Self {
        AdamParams {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Optimizer moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, params: AdamParams) -> Self {
        AdamState {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            params,
        }
    }
}

/// One Adam update with bias correction.
///
/// With a mask, inactive positions of the parameter and both moments are
/// forced to exactly zero; the update never touches them.
pub fn adam_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    mask: Option<&ConnectivityMask>,
) -> Result<()> {
    if !param.same_shape(grad) || !param.same_shape(&state.first_moment) {
        return Err(Error::shape(
            "adam_step",
            format!("{}x{}", param.rows(), param.cols()),
            format!(
                "grad {}x{}, moments {}x{}",
                grad.rows(),
                grad.cols(),
                state.first_moment.rows(),
                state.first_moment.cols()
            ),
        ));
    }
    if let Some(m) = mask {
        if m.rows() != param.rows() || m.cols() != param.cols() {
            return Err(Error::shape(
                "adam_step",
                format!("mask {}x{}", param.rows(), param.cols()),
                format!("{}x{}", m.rows(), m.cols()),
            ));
        }
    }

    state.step_count += 1;
    let t = state.step_count as f64;
    let p = state.params;
    let corr1 = (1.0 - (p.beta1 as f64).powi(t as i32)) as f32;
    let corr2 = (1.0 - (p.beta2 as f64).powi(t as i32)) as f32;
    let cols = param.cols();

    let pd = param.as_mut_slice();
    let gd = grad.as_slice();
    let md = state.first_moment.as_mut_slice();
    let vd = state.second_moment.as_mut_slice();

    for i in 0..pd.len() {
        if let Some(mask) = mask {
            if !mask.get(i / cols, i % cols) {
                pd[i] = 0.0;
                md[i] = 0.0;
                vd[i] = 0.0;
                continue;
            }
        }
        let g = gd[i];
        md[i] = p.beta1 * md[i] + (1.0 - p.beta1) * g;
        vd[i] = p.beta2 * vd[i] + (1.0 - p.beta2) * g * g;
        let m_hat = md[i] / corr1;
        let v_hat = vd[i] / corr2;
        pd[i] -= p.learning_rate * m_hat / (v_hat.sqrt() + p.epsilon);
    }
    Ok(())
}
