//! Parameter containers shared by the backbone and the forecasting heads.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Affine map `x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Weights `N(0, std)`, zero bias.
    pub fn normal<R: Rng + ?Sized>(inputs: usize, outputs: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(vec![inputs, outputs], std, rng),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    /// Weights and bias `U(−1/√in, 1/√in)`.
    pub fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        Linear {
            weight: Tensor::uniform(vec![inputs, outputs], bound, rng),
            bias: Tensor::uniform(vec![outputs], bound, rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.weight.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }


    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64) -> Self {
        LayerNorm {
            gain: Tensor::ones(vec![dim]),
            bias: Tensor::zeros(vec![dim]),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.leaf(&self.gain);
        let b = tape.leaf(&self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.gain.set_requires_grad(on);
        self.bias.set_requires_grad(on);
    }


    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gain"), &mut self.gain);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}
