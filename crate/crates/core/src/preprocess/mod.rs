//! Instance normalisation, decomposition, patching and meta-token assembly.

mod decompose;
mod patch;
mod revin;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use decompose::{
    decompose, decompose_with, moving_average_replicate, DecompositionMethod, DecompositionResult,
    StlOptions,
};
pub use patch::{patch, PatchSpec};
pub use revin::{moments, revin_denormalize, revin_normalize, RevInState, DEFAULT_EPSILON};

/// How each window is split into components before patching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecompositionConfig {
    /// When off, the whole window is the trend block and the other two
    /// blocks are zero.
    pub enabled: bool,
    pub method: DecompositionMethod,
    pub period: usize,
    pub trend_window: usize,
    pub stl: StlOptions,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        DecompositionConfig {
            enabled: true,
            method: DecompositionMethod::Classical,
            period: 24,
            trend_window: 25,
            stl: StlOptions::default(),
        }
    }
}

impl DecompositionConfig {
    pub fn validate(&self, lookback: usize) -> Result<()> {
        if self.enabled {
            decompose::validate(lookback, self.period, self.trend_window)?;
        }
        Ok(())
    }

    /// `(trend, seasonal, residual)` of one window.
    pub fn components(&self, x: &[f64]) -> Result<[Vec<f64>; 3]> {
        if !self.enabled {
            return Ok([x.to_vec(), vec![0.0; x.len()], vec![0.0; x.len()]]);
        }
        let d = decompose_with(x, self.period, self.trend_window, self.method, &self.stl)?;
        Ok([d.trend, d.seasonal, d.residual])
    }
}

/// Per-window token matrix `N_P × 3·L_P`: trend, seasonal and residual
/// patches side by side, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaToken {
    pub values: Tensor,
    pub n_patches: usize,
    pub revin: RevInState,
}

const META_TOKEN_MAGIC: &[u8; 8] = b"METATOK\0";

impl MetaToken {
    pub fn patch_length(&self) -> usize {
        self.values.cols() / 3
    }

    /// Row-major `f64` dump behind a 16-byte header: 8-byte magic, then
    /// `N_P` and `3·L_P` as little-endian `u32`.
    pub fn write_debug<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(META_TOKEN_MAGIC)?;
        w.write_all(&(self.n_patches as u32).to_le_bytes())?;
        w.write_all(&(self.values.cols() as u32).to_le_bytes())?;
        for v in self.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

pub fn build_meta_token(
    trend: &Tensor,
    seasonal: &Tensor,
    residual: &Tensor,
    revin: RevInState,
) -> Result<MetaToken> {
    if trend.rank() != 2 || trend.shape() != seasonal.shape() || trend.shape() != residual.shape() {
        return Err(Error::validation(format!(
            "component patch shapes differ: {:?}, {:?}, {:?}",
            trend.shape(),
            seasonal.shape(),
            residual.shape()
        )));
    }
    let (rows, width) = (trend.rows(), trend.cols());
    let mut data = Vec::with_capacity(rows * width * 3);
    for r in 0..rows {
        data.extend_from_slice(trend.row(r));
        data.extend_from_slice(seasonal.row(r));
        data.extend_from_slice(residual.row(r));
    }
    Ok(MetaToken {
        values: Tensor::matrix(rows, 3 * width, data)?,
        n_patches: rows,
        revin,
    })
}

/// Normalise → decompose → patch → concatenate, for one window.
pub fn tokenize(
    x: &[f64],
    gamma: f64,
    beta: f64,
    epsilon: f64,
    decomposition: &DecompositionConfig,
    patching: &PatchSpec,
) -> Result<MetaToken> {
    let (normed, state) = revin_normalize(x, gamma, beta, epsilon)?;
    let [t, s, r] = decomposition.components(&normed)?;
    build_meta_token(
        &patch(&t, patching)?,
        &patch(&s, patching)?,
        &patch(&r, patching)?,
        state,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_state() -> RevInState {
        RevInState {
            mean: 0.0,
            variance: 1.0,
            gamma: 1.0,
            beta: 0.0,
            epsilon: 0.0,
        }
    }

    #[test]
    fn concatenation_layout() {
        let a = Tensor::full(vec![2, 3], 1.0);
        let b = Tensor::full(vec![2, 3], 2.0);
        let c = Tensor::full(vec![2, 3], 3.0);
        let m = build_meta_token(&a, &b, &c, identity_state()).unwrap();
        assert_eq!(m.values.shape(), [2, 9]);
        assert_eq!(m.values.row(1), [1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn full_size_zero_token() {
        let z = Tensor::zeros(vec![64, 16]);
        let m = build_meta_token(&z, &z, &z, identity_state()).unwrap();
        assert_eq!(m.values.shape(), [64, 48]);
        assert!(m.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_components() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 3]);
        assert!(matches!(
            build_meta_token(&a, &b, &a, identity_state()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn debug_dump_header() {
        let z = Tensor::zeros(vec![4, 6]);
        let m = build_meta_token(&z, &z, &z, identity_state()).unwrap();
        let mut buf = Vec::new();
        m.write_debug(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 4 * 18 * 8);
        assert_eq!(&buf[..8], META_TOKEN_MAGIC);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 18);
    }

    #[test]
    fn tokenize_constant_window() {
        let cfg = DecompositionConfig {
            period: 12,
            trend_window: 13,
            ..DecompositionConfig::default()
        };
        let m = tokenize(&[2.0; 96], 1.0, 0.0, DEFAULT_EPSILON, &cfg, &PatchSpec::default()).unwrap();
        assert_eq!(m.values.shape(), [12, 48]);
        for r in 0..12 {
            assert!(m.values.row(r)[16..].iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn disabled_decomposition_puts_everything_in_trend() {
        let cfg = DecompositionConfig {
            enabled: false,
            ..DecompositionConfig::default()
        };
        let x: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let [t, s, r] = cfg.components(&x).unwrap();
        assert_eq!(t, x);
        assert!(s.iter().chain(&r).all(|&v| v == 0.0));
    }
}
