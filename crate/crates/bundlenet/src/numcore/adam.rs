//! Adam update rule with bias correction.

use super::dense::DenseMatrix;
use super::NumError;

/// Per-parameter moment accumulators plus optimizer hyperparameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    first_moment: Vec<DenseMatrix>,
    second_moment: Vec<DenseMatrix>,
    step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Moments start at zero with the same shapes as `params`.
    pub fn new(params: &[DenseMatrix], learning_rate: f64) -> Self {
        AdamState {
            first_moment: params
                .iter()
                .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
                .collect(),
            second_moment: params
                .iter()
                .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
                .collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over a flat parameter list; gradients align by index.
pub fn adam_step(
    params: &mut [DenseMatrix],
    grads: &[DenseMatrix],
    state: &mut AdamState,
) -> Result<(), NumError> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(NumError::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != state.first_moment[i].shape() {
            return Err(NumError::Shape(format!(
                "adam: param {} is {:?}, grad {:?}, moment {:?}",
                i,
                p.shape(),
                grads[i].shape(),
                state.first_moment[i].shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut().zip(&mut state.second_moment))
    {
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mv = state.beta1 * *mv + (1.0 - state.beta1) * gv;
            *vv = state.beta2 * *vv + (1.0 - state.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}
