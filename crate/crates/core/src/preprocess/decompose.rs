//! Additive seasonal-trend decomposition.
//!
//! Both methods define the residual as `x − trend − seasonal`, so the three
//! parts always sum back to the input. Both are also affine-equivariant:
//! decomposing `a·x + b` yields `a·trend + b`, `a·seasonal`, `a·residual`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DecompositionMethod {
    /// Centred moving-average trend, per-phase mean seasonal.
    #[default]
    Classical,
    /// Seasonal-trend decomposition by Loess.
    Stl,
}

/// Loess tuning for [`DecompositionMethod::Stl`]. The trend span is the
/// `trend_window` passed to [`decompose_with`]; the low-pass span is the
/// smallest odd integer ≥ the period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StlOptions {
    /// Span of the cycle-subseries smoother (odd, ≥ 3).
    pub seasonal_window: usize,
    pub inner_iterations: usize,
    /// Robustness passes; 0 disables reweighting.
    pub outer_iterations: usize,
}

impl Default for StlOptions {
    fn default() -> Self {
        StlOptions {
            seasonal_window: 7,
            inner_iterations: 2,
            outer_iterations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    pub residual: Vec<f64>,
    pub period: usize,
    pub trend_window: usize,
    pub method: DecompositionMethod,
}

pub fn decompose(
    x: &[f64],
    period: usize,
    trend_window: usize,
    method: DecompositionMethod,
) -> Result<DecompositionResult> {
    decompose_with(x, period, trend_window, method, &StlOptions::default())
}

pub fn decompose_with(
    x: &[f64],
    period: usize,
    trend_window: usize,
    method: DecompositionMethod,
    stl: &StlOptions,
) -> Result<DecompositionResult> {
    validate(x.len(), period, trend_window)?;
    let (trend, seasonal) = match method {
        DecompositionMethod::Classical => classical(x, period, trend_window),
        DecompositionMethod::Stl => {
            if stl.seasonal_window < 3 || stl.seasonal_window % 2 == 0 {
                return Err(Error::validation(format!(
                    "STL seasonal window must be odd and ≥ 3, got {}",
                    stl.seasonal_window
                )));
            }
            if stl.inner_iterations == 0 {
                return Err(Error::validation("STL needs at least one inner iteration"));
            }
            stl_decompose(x, period, trend_window, stl)
        }
    };
    let residual = x
        .iter()
        .zip(&trend)
        .zip(&seasonal)
        .map(|((v, t), s)| v - t - s)
        .collect();
    Ok(DecompositionResult {
        trend,
        seasonal,
        residual,
        period,
        trend_window,
        method,
    })
}

pub fn validate(len: usize, period: usize, trend_window: usize) -> Result<()> {
    if period < 2 || period > len / 2 {
        return Err(Error::validation(format!(
            "period {period} must lie in [2, {}] for a window of {len}",
            len / 2
        )));
    }
    if trend_window % 2 == 0 || trend_window > len {
        return Err(Error::validation(format!(
            "trend window {trend_window} must be odd and ≤ {len}"
        )));
    }
    Ok(())
}

/// Centred moving average over the series extended by replicating its end
/// values `window / 2` times on each side.
pub fn moving_average_replicate(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let first = x[0];
    let last = x[x.len() - 1];
    let extended: Vec<f64> = std::iter::repeat_n(first, half)
        .chain(x.iter().copied())
        .chain(std::iter::repeat_n(last, half))
        .collect();
    extended
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

fn classical(x: &[f64], period: usize, trend_window: usize) -> (Vec<f64>, Vec<f64>) {
    let trend = moving_average_replicate(x, trend_window);
    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for (i, (v, t)) in x.iter().zip(&trend).enumerate() {
        sums[i % period] += v - t;
        counts[i % period] += 1;
    }
    let phase: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let centre = phase.iter().sum::<f64>() / period as f64;
    let seasonal = (0..x.len()).map(|i| phase[i % period] - centre).collect();
    (trend, seasonal)
}

// ---- STL ----------------------------------------------------------------

/// Local-linear Loess estimate at `at` from samples `ys` at positions
/// `0..ys.len()`, using the `span` nearest points with tricube weights times
/// the optional robustness weights.
fn loess_at(ys: &[f64], robustness: Option<&[f64]>, span: usize, at: f64) -> f64 {
    let n = ys.len();
    let q = span.min(n);
    // nearest q contiguous points
    let centre = at.round().clamp(0.0, (n - 1) as f64) as usize;
    let mut left = centre.saturating_sub(q / 2);
    if left + q > n {
        left = n - q;
    }
    let right = left + q - 1;
    let mut h = (at - left as f64).abs().max((right as f64 - at).abs());
    if span > n {
        h += ((span - n) / 2) as f64;
    }

    let mut sw = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut weights = Vec::with_capacity(q);
    for j in left..=right {
        let r = (j as f64 - at).abs();
        let mut w = if h <= 0.0 || r <= 0.001 * h {
            1.0
        } else if r < 0.999 * h {
            let u = r / h;
            let t = 1.0 - u * u * u;
            t * t * t
        } else {
            0.0
        };
        if let Some(rw) = robustness {
            w *= rw[j];
        }
        weights.push(w);
        sw += w;
        sx += w * j as f64;
        sy += w * ys[j];
    }
    if sw <= 0.0 {
        return ys[left..=right].iter().sum::<f64>() / q as f64;
    }
    let mx = sx / sw;
    let my = sy / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (k, j) in (left..=right).enumerate() {
        let dx = j as f64 - mx;
        sxx += weights[k] * dx * dx;
        sxy += weights[k] * dx * (ys[j] - my);
    }
    // weighted spread too small for a slope: fall back to the local mean
    let range = (right - left) as f64;
    if sxx <= 1e-10 * sw * range * range || sxx == 0.0 {
        return my;
    }
    my + sxy / sxx * (at - mx)
}

fn loess(ys: &[f64], robustness: Option<&[f64]>, span: usize) -> Vec<f64> {
    (0..ys.len())
        .map(|i| loess_at(ys, robustness, span, i as f64))
        .collect()
}

fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    x.windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

fn smallest_odd_at_least(v: usize) -> usize {
    if v % 2 == 0 {
        v + 1
    } else {
        v
    }
}

fn stl_decompose(x: &[f64], period: usize, trend_window: usize, opts: &StlOptions) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let low_pass = smallest_odd_at_least(period);
    let mut trend = vec![0.0; n];
    let mut seasonal = vec![0.0; n];
    let mut robustness: Option<Vec<f64>> = None;

    for outer in 0..=opts.outer_iterations {
        for _ in 0..opts.inner_iterations {
            let detrended: Vec<f64> = x.iter().zip(&trend).map(|(v, t)| v - t).collect();

            // cycle-subseries smoothing, extended one cycle on each side
            let mut cycle = vec![0.0; n + 2 * period];
            for phase in 0..period {
                let idx: Vec<usize> = (phase..n).step_by(period).collect();
                let sub: Vec<f64> = idx.iter().map(|&i| detrended[i]).collect();
                let sub_rw: Option<Vec<f64>> =
                    robustness.as_ref().map(|rw| idx.iter().map(|&i| rw[i]).collect());
                let m = sub.len();
                for k in 0..m + 2 {
                    let at = k as f64 - 1.0;
                    cycle[k * period + phase] =
                        loess_at(&sub, sub_rw.as_deref(), opts.seasonal_window, at);
                }
            }

            // low-pass filter of the cycle series
            let lp = moving_average(&cycle, period);
            let lp = moving_average(&lp, period);
            let lp = moving_average(&lp, 3);
            let lp = loess(&lp, None, low_pass);

            for i in 0..n {
                seasonal[i] = cycle[period + i] - lp[i];
            }
            let deseasonalised: Vec<f64> = x.iter().zip(&seasonal).map(|(v, s)| v - s).collect();
            trend = loess(&deseasonalised, robustness.as_deref(), trend_window);
        }

        if outer < opts.outer_iterations {
            let resid: Vec<f64> = (0..n).map(|i| (x[i] - trend[i] - seasonal[i]).abs()).collect();
            let mut sorted = resid.clone();
            sorted.sort_by(f64::total_cmp);
            let median = if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            };
            let h = 6.0 * median;
            robustness = Some(
                resid
                    .iter()
                    .map(|&r| {
                        if h <= 0.0 {
                            1.0
                        } else {
                            let u = r / h;
                            if u < 1.0 {
                                (1.0 - u * u) * (1.0 - u * u)
                            } else {
                                0.0
                            }
                        }
                    })
                    .collect(),
            );
        }
    }
    (trend, seasonal)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line classical decomposition used as an oracle.
    fn oracle_classical(x: &[f64], period: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = x.len();
        let half = (w / 2) as isize;
        let mut trend = vec![0.0; n];
        for i in 0..n as isize {
            let mut s = 0.0;
            for j in i - half..=i + half {
                let k = j.clamp(0, n as isize - 1) as usize;
                s += x[k];
            }
            trend[i as usize] = s / w as f64;
        }
        let mut phase = vec![0.0; period];
        for p in 0..period {
            let vals: Vec<f64> = (p..n).step_by(period).map(|i| x[i] - trend[i]).collect();
            phase[p] = vals.iter().sum::<f64>() / vals.len() as f64;
        }
        let avg = phase.iter().sum::<f64>() / period as f64;
        let seasonal: Vec<f64> = (0..n).map(|i| phase[i % period] - avg).collect();
        let resid = (0..n).map(|i| x[i] - trend[i] - seasonal[i]).collect();
        (trend, seasonal, resid)
    }

    fn wave(n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let t = i as f64;
                0.05 * t + (2.0 * std::f64::consts::PI * t / 12.0).sin() + 0.3 * (t * 1.7).cos()
            })
            .collect()
    }

    #[test]
    fn constant_series_is_all_trend() {
        for method in [DecompositionMethod::Classical, DecompositionMethod::Stl] {
            let d = decompose(&[3.5; 48], 12, 13, method).unwrap();
            for i in 0..48 {
                assert!((d.trend[i] - 3.5).abs() < 1e-9, "{method:?}");
                assert!(d.seasonal[i].abs() < 1e-9, "{method:?}");
                assert!(d.residual[i].abs() < 1e-9, "{method:?}");
            }
        }
    }

    #[test]
    fn alternating_series_matches_oracle() {
        let x = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let d = decompose(&x, 2, 3, DecompositionMethod::Classical).unwrap();
        let (t, s, r) = oracle_classical(&x, 2, 3);
        for i in 0..x.len() {
            assert!((d.trend[i] - t[i]).abs() < 1e-12);
            assert!((d.seasonal[i] - s[i]).abs() < 1e-12);
            assert!((d.residual[i] - r[i]).abs() < 1e-12);
        }
        // interior trend alternates 2/3, 1/3; phase means of the detrended
        // series are ∓7/12 once the replicated edges are included
        assert!((d.seasonal[0] + 7.0 / 12.0).abs() < 1e-12);
        assert!((d.seasonal[1] - 7.0 / 12.0).abs() < 1e-12);
        assert!(d.residual[2..6].iter().all(|r| (r.abs() - 1.0 / 12.0).abs() < 1e-12));
    }

    #[test]
    fn classical_matches_oracle_on_wave() {
        let x = wave(96);
        let d = decompose(&x, 12, 25, DecompositionMethod::Classical).unwrap();
        let (t, s, _) = oracle_classical(&x, 12, 25);
        for i in 0..x.len() {
            assert!((d.trend[i] - t[i]).abs() < 1e-12);
            assert!((d.seasonal[i] - s[i]).abs() < 1e-12);
        }
        for c in d.seasonal.chunks_exact(12) {
            assert!(c.iter().sum::<f64>().abs() < 1e-6);
        }
    }

    #[test]
    fn stl_recovers_a_clean_season() {
        let n = 120;
        let season = |i: usize| (2.0 * std::f64::consts::PI * i as f64 / 12.0).sin();
        let x: Vec<f64> = (0..n).map(|i| 0.02 * i as f64 + season(i)).collect();
        let d = decompose(&x, 12, 23, DecompositionMethod::Stl).unwrap();
        for i in 12..n - 12 {
            assert!((d.seasonal[i] - season(i)).abs() < 0.1, "i={i}");
        }
    }

    #[test]
    fn affine_equivariance() {
        let x = wave(64);
        let y: Vec<f64> = x.iter().map(|v| -1.7 * v + 4.0).collect();
        let opts = StlOptions {
            outer_iterations: 2,
            ..StlOptions::default()
        };
        for method in [DecompositionMethod::Classical, DecompositionMethod::Stl] {
            let a = decompose_with(&x, 8, 9, method, &opts).unwrap();
            let b = decompose_with(&y, 8, 9, method, &opts).unwrap();
            for i in 0..x.len() {
                assert!((b.trend[i] - (-1.7 * a.trend[i] + 4.0)).abs() < 1e-9);
                assert!((b.seasonal[i] + 1.7 * a.seasonal[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn validation() {
        let x = vec![0.0; 20];
        assert!(decompose(&x, 1, 3, DecompositionMethod::Classical).is_err());
        assert!(decompose(&x, 11, 3, DecompositionMethod::Classical).is_err());
        assert!(decompose(&x, 4, 4, DecompositionMethod::Classical).is_err());
        assert!(decompose(&x, 4, 21, DecompositionMethod::Classical).is_err());
        let opts = StlOptions {
            seasonal_window: 4,
            ..StlOptions::default()
        };
        assert!(decompose_with(&x, 4, 5, DecompositionMethod::Stl, &opts).is_err());
    }
}
