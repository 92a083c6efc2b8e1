use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub patch_length: usize,
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_length: 16,
            stride: 8,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self, lookback: usize) -> Result<()> {
        if self.patch_length == 0 || self.stride == 0 {
            return Err(Error::validation("patch length and stride must be positive"));
        }
        if self.stride > self.patch_length {
            return Err(Error::validation(format!(
                "patch stride {} exceeds patch length {}",
                self.stride, self.patch_length
            )));
        }
        if self.patch_length > lookback {
            return Err(Error::validation(format!(
                "patch length {} exceeds lookback {}",
                self.patch_length, lookback
            )));
        }
        Ok(())
    }

    /// `floor((τ − L) / S) + 2`.
    pub fn n_patches(&self, lookback: usize) -> usize {
        (lookback - self.patch_length) / self.stride + 2
    }
}

/// Slice a series into overlapping patches after repeating its last value
/// `stride` times. Rows are verbatim windows of the padded series.
pub fn patch(component: &[f64], spec: &PatchSpec) -> Result<Tensor> {
    spec.validate(component.len())?;
    let last = *component.last().expect("validated non-empty");
    let mut padded = component.to_vec();
    padded.extend(std::iter::repeat_n(last, spec.stride));

    let mut data = Vec::new();
    let mut rows = 0;
    let mut start = 0;
    while start + spec.patch_length <= padded.len() {
        data.extend_from_slice(&padded[start..start + spec.patch_length]);
        rows += 1;
        start += spec.stride;
    }
    Tensor::matrix(rows, spec.patch_length, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_constants_give_64_patches() {
        let spec = PatchSpec::default();
        assert_eq!(spec.n_patches(512), 64);
        let x: Vec<f64> = (0..512).map(f64::from).collect();
        assert_eq!(patch(&x, &spec).unwrap().rows(), 64);
    }

    #[test]
    fn exact_fit_gets_a_padded_second_patch() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patch(&x, &PatchSpec::default()).unwrap();
        assert_eq!(p.shape(), [2, 16]);
        assert_eq!(&p.row(1)[..8], &x[8..16]);
        assert!(p.row(1)[8..].iter().all(|&v| v == 15.0));
    }

    #[test]
    fn offsets_follow_stride() {
        let x: Vec<f64> = (0..96).map(|v| v as f64 * 0.5).collect();
        let p = patch(&x, &PatchSpec::default()).unwrap();
        assert_eq!(p.rows(), 12);
        assert_eq!(p.row(0), &x[0..16]);
        assert_eq!(p.row(1), &x[8..24]);
    }

    #[test]
    fn rejects_bad_specs() {
        let x = vec![0.0; 10];
        assert!(patch(&x, &PatchSpec::default()).is_err());
        let wide_stride = PatchSpec {
            patch_length: 4,
            stride: 5,
        };
        assert!(patch(&x, &wide_stride).is_err());
    }
}
