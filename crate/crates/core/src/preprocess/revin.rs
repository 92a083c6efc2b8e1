use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Instance statistics plus the affine parameters used to normalise one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RevInState {
    pub mean: f64,
    /// Population variance of the window.
    pub variance: f64,
    pub gamma: f64,
    pub beta: f64,
    pub epsilon: f64,
}

impl RevInState {
    pub fn scale(&self) -> f64 {
        (self.variance + self.epsilon).sqrt()
    }
}

/// Mean and population variance.
pub fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// `gamma · (x − mean) / sqrt(var + eps) + beta` with window statistics.
pub fn revin_normalize(x: &[f64], gamma: f64, beta: f64, epsilon: f64) -> Result<(Vec<f64>, RevInState)> {
    if x.len() < 2 {
        return Err(Error::validation(format!(
            "instance normalisation needs at least 2 steps, got {}",
            x.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::validation(format!("epsilon must be positive, got {epsilon}")));
    }
    let (mean, variance) = moments(x);
    let state = RevInState {
        mean,
        variance,
        gamma,
        beta,
        epsilon,
    };
    let s = state.scale();
    let out = x.iter().map(|v| gamma * (v - mean) / s + beta).collect();
    Ok((out, state))
}

/// Exact inverse of [`revin_normalize`] for the stored statistics.
pub fn revin_denormalize(y: &[f64], state: &RevInState) -> Result<Vec<f64>> {
    if state.gamma == 0.0 {
        return Err(Error::Singular("revin gamma is zero".into()));
    }
    let s = state.scale();
    Ok(y
        .iter()
        .map(|v| (v - state.beta) / state.gamma * s + state.mean)
        .collect())
}
