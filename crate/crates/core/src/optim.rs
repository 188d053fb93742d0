use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f32 = 1e-4;
pub const DEFAULT_BETA1: f32 = 0.5;
pub const DEFAULT_BETA2: f32 = 0.999;
pub const DEFAULT_EPSILON: f32 = 1e-8;

/// Moments and hyper-parameters of a bias-corrected Adam optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
    pub step_count: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub learning_rate: f32,
}

impl AdamState {
    /// Zeroed moments for parameters of the given lengths.
    pub fn new(param_lengths: &[usize], learning_rate: f32) -> Self {
        Self {
            first_moment: param_lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: param_lengths.iter().map(|&n| vec![0.0; n]).collect(),
            step_count: 0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
            learning_rate,
        }
    }

    pub fn for_params(params: &[Tensor], learning_rate: f32) -> Self {
        let lens: Vec<usize> = params.iter().map(Tensor::numel).collect();
        Self::new(&lens, learning_rate)
    }

    pub fn validate_for(&self, params: &[Tensor]) -> Result<()> {
        if self.first_moment.len() != params.len() || self.second_moment.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} tensors, got {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.first_moment[i].len() != p.numel() || self.second_moment[i].len() != p.numel() {
                return Err(Error::State(format!(
                    "moment length mismatch for parameter {i}: {} values vs {}",
                    p.numel(),
                    self.first_moment[i].len()
                )));
            }
        }
        Ok(())
    }
}

/// One Adam update of every parameter. Gradients are read, not cleared.
pub fn adam_step(params: &mut [Tensor], state: &mut AdamState) -> Result<()> {
    state.validate_for(params)?;
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::State(format!("parameter {i} has no gradient")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - (b1 as f64).powi(t);
    let bc2 = 1.0 - (b2 as f64).powi(t);
    let lr = state.learning_rate as f64;
    let eps = state.epsilon as f64;
    for (i, p) in params.iter_mut().enumerate() {
        let grad = p.grad().expect("checked above").to_vec();
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m as f64 / bc1;
            let v_hat = *v as f64 / bc2;
            *w -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}
