//! Point-forecast metrics, the Naive2 reference forecaster and model
//! evaluation over windows.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForecastModel;
use crate::series::Window;

fn check_lengths(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() || y.is_empty() {
        return Err(Error::validation(format!(
            "forecast length {} vs target length {} (both must be equal and non-zero)",
            yhat.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn mse_mae(y: &[f64], yhat: &[f64]) -> Result<(f64, f64)> {
    check_lengths(y, yhat)?;
    let n = y.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        se += (a - b) * (a - b);
        ae += (a - b).abs();
    }
    Ok((se / n, ae / n))
}

/// `200/H · Σ |y − ŷ| / (|y| + |ŷ|)`; terms with a zero denominator add 0.
pub fn smape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_lengths(y, yhat)?;
    let total: f64 = y
        .iter()
        .zip(yhat)
        .map(|(a, b)| {
            let d = a.abs() + b.abs();
            if d == 0.0 {
                0.0
            } else {
                (a - b).abs() / d
            }
        })
        .sum();
    Ok(200.0 * total / y.len() as f64)
}

/// `100/H · Σ |y − ŷ| / |y|`, absent when any target is zero.
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<Option<f64>> {
    check_lengths(y, yhat)?;
    if y.iter().any(|&v| v == 0.0) {
        return Ok(None);
    }
    let total: f64 = y.iter().zip(yhat).map(|(a, b)| ((a - b) / a).abs()).sum();
    Ok(Some(100.0 * total / y.len() as f64))
}

/// Mean absolute error scaled by the in-sample seasonal-naive MAE at lag `s`.
/// Absent when that denominator is zero.
pub fn mase(y: &[f64], yhat: &[f64], insample: &[f64], s: usize) -> Result<Option<f64>> {
    check_lengths(y, yhat)?;
    let s = s.max(1);
    if insample.len() <= s {
        return Err(Error::validation(format!(
            "MASE needs more than s = {s} in-sample points, got {}",
            insample.len()
        )));
    }
    let denom: f64 = insample
        .windows(s + 1)
        .map(|w| (w[s] - w[0]).abs())
        .sum::<f64>()
        / (insample.len() - s) as f64;
    if denom == 0.0 {
        return Ok(None);
    }
    let (_, mae) = mse_mae(y, yhat)?;
    Ok(Some(mae / denom))
}

/// `½ (sMAPE / sMAPE_naive2 + MASE / MASE_naive2)`, absent on a zero denominator.
pub fn owa(model_smape: f64, model_mase: f64, naive2_smape: f64, naive2_mase: f64) -> Option<f64> {
    if naive2_smape == 0.0 || naive2_mase == 0.0 {
        return None;
    }
    Some(0.5 * (model_smape / naive2_smape + model_mase / naive2_mase))
}

/// Seasonality test used by Naive2: `|acf(s)| > scale · z / √n`, with at
/// least three full cycles of history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Naive2Options {
    pub threshold_scale: f64,
    pub z: f64,
}

impl Default for Naive2Options {
    fn default() -> Self {
        Naive2Options {
            threshold_scale: 0.9,
            z: 1.645,
        }
    }
}

pub fn autocorrelation(x: &[f64], lag: usize) -> Option<f64> {
    if lag >= x.len() {
        return None;
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let denom: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    if denom == 0.0 {
        return None;
    }
    let num: f64 = (0..x.len() - lag)
        .map(|t| (x[t] - mean) * (x[t + lag] - mean))
        .sum();
    Some(num / denom)
}

pub fn is_seasonal(x: &[f64], s: usize, options: &Naive2Options) -> bool {
    if s <= 1 || x.len() < 3 * s {
        return false;
    }
    let limit = options.threshold_scale * options.z / (x.len() as f64).sqrt();
    autocorrelation(x, s).is_some_and(|acf| acf.abs() > limit)
}

/// Classical multiplicative seasonal indices (mean 1), indexed by
/// `t mod s` with `t` counted from the start of `x`.
pub fn seasonal_indices(x: &[f64], s: usize) -> Vec<f64> {
    let n = x.len();
    // centred moving average; 2×s for even s
    let half = s / 2;
    let mut sums = vec![0.0; s];
    let mut counts = vec![0usize; s];
    for t in half..n.saturating_sub(half) {
        let ma = if s % 2 == 1 {
            x[t - half..=t + half].iter().sum::<f64>() / s as f64
        } else {
            if t + half >= n {
                continue;
            }
            let inner: f64 = x[t + 1 - half..t + half].iter().sum();
            (0.5 * x[t - half] + inner + 0.5 * x[t + half]) / s as f64
        };
        if ma != 0.0 {
            sums[t % s] += x[t] / ma;
            counts[t % s] += 1;
        }
    }
    let mut idx: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(&a, &c)| if c == 0 { 1.0 } else { a / c as f64 })
        .collect();
    let mean = idx.iter().sum::<f64>() / s as f64;
    if mean != 0.0 {
        idx.iter_mut().for_each(|v| *v /= mean);
    }
    idx
}

/// M4 Naive2: seasonally adjust by multiplicative classical indices when the
/// seasonality test passes and all values are positive, repeat the last
/// adjusted value, then reseasonalise. Otherwise repeat the last value.
pub fn naive2_forecast(insample: &[f64], s: usize, horizon: usize) -> Result<Vec<f64>> {
    naive2_forecast_with(insample, s, horizon, &Naive2Options::default())
}

pub fn naive2_forecast_with(
    insample: &[f64],
    s: usize,
    horizon: usize,
    options: &Naive2Options,
) -> Result<Vec<f64>> {
    if insample.len() < s.max(1) {
        return Err(Error::validation(format!(
            "Naive2 needs at least max(s, 1) = {} points, got {}",
            s.max(1),
            insample.len()
        )));
    }
    let last = *insample.last().expect("non-empty");
    let positive = insample.iter().all(|&v| v > 0.0);
    if !(positive && is_seasonal(insample, s, options)) {
        return Ok(vec![last; horizon]);
    }
    let idx = seasonal_indices(insample, s);
    let n = insample.len();
    let level = last / idx[(n - 1) % s];
    Ok((0..horizon).map(|h| level * idx[(n + h) % s]).collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricsMode {
    /// MSE and MAE only.
    #[default]
    Long,
    /// Adds sMAPE, MAPE, MASE and OWA against Naive2.
    Short,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub mode: MetricsMode,
    /// Seasonal period `s` for MASE and Naive2.
    pub seasonality: usize,
    pub naive2: Naive2Options,
    pub batch_size: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            mode: MetricsMode::Long,
            seasonality: 24,
            naive2: Naive2Options::default(),
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub smape: Option<f64>,
    pub mape: Option<f64>,
    pub mase: Option<f64>,
    pub owa: Option<f64>,
    pub horizon: usize,
    pub seasonality: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 8] =
        ["mse", "mae", "smape", "mape", "mase", "owa", "horizon", "seasonality"];

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.mse.to_string(),
            self.mae.to_string(),
            opt(self.smape),
            opt(self.mape),
            opt(self.mase),
            opt(self.owa),
            self.horizon.to_string(),
            self.seasonality.to_string(),
        ]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::CSV_HEADER)?;
        w.write_record(self.csv_fields())?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowMetrics {
    pub window_id: usize,
    pub channel: usize,
    pub mse: f64,
    pub mae: f64,
    pub smape: Option<f64>,
    pub mape: Option<f64>,
    pub mase: Option<f64>,
    /// Naive2's sMAPE and MASE on the same window.
    pub naive2: Option<(f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub per_window: Vec<WindowMetrics>,
}

impl Evaluation {
    /// `window_id,channel,mse,mae[,smape,mase]`.
    pub fn write_per_window_csv(&self, path: &Path) -> Result<()> {
        let short = self.report.smape.is_some();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["window_id", "channel", "mse", "mae"];
        if short {
            header.extend(["smape", "mase"]);
        }
        w.write_record(&header)?;
        for m in &self.per_window {
            let mut row = vec![
                m.window_id.to_string(),
                m.channel.to_string(),
                m.mse.to_string(),
                m.mae.to_string(),
            ];
            if short {
                row.push(opt(m.smape));
                row.push(opt(m.mase));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        total += v;
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

/// Score precomputed forecasts, one per window. Aggregates are plain means
/// over windows; OWA compares the aggregated model and Naive2 means.
pub fn evaluate_forecasts(
    windows: &[Window],
    forecasts: &[Vec<f64>],
    config: &MetricsConfig,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::validation("no windows to evaluate"));
    }
    if windows.len() != forecasts.len() {
        return Err(Error::validation(format!(
            "{} forecasts for {} windows",
            forecasts.len(),
            windows.len()
        )));
    }
    let s = config.seasonality;
    let short = config.mode == MetricsMode::Short;
    let mut per_window = Vec::with_capacity(windows.len());
    for (id, (w, f)) in windows.iter().zip(forecasts).enumerate() {
        let (mse, mae) = mse_mae(&w.target, f)?;
        let mut m = WindowMetrics {
            window_id: id,
            channel: w.channel,
            mse,
            mae,
            smape: None,
            mape: None,
            mase: None,
            naive2: None,
        };
        if short {
            m.smape = Some(smape(&w.target, f)?);
            m.mape = mape(&w.target, f)?;
            m.mase = mase(&w.target, f, &w.input, s)?;
            let reference = naive2_forecast_with(&w.input, s, w.target.len(), &config.naive2)?;
            m.naive2 = Some((
                smape(&w.target, &reference)?,
                mase(&w.target, &reference, &w.input, s)?,
            ));
        }
        per_window.push(m);
    }
    let n = per_window.len() as f64;
    let mut report = MetricReport {
        mse: per_window.iter().map(|m| m.mse).sum::<f64>() / n,
        mae: per_window.iter().map(|m| m.mae).sum::<f64>() / n,
        smape: None,
        mape: None,
        mase: None,
        owa: None,
        horizon: windows[0].target.len(),
        seasonality: s,
    };
    if short {
        report.smape = mean_defined(per_window.iter().map(|m| m.smape));
        report.mape = if per_window.iter().all(|m| m.mape.is_some()) {
            mean_defined(per_window.iter().map(|m| m.mape))
        } else {
            None
        };
        // MASE and its Naive2 counterpart share a denominator, so they are
        // defined on the same windows
        report.mase = mean_defined(per_window.iter().map(|m| m.mase));
        let n2_smape = mean_defined(per_window.iter().map(|m| m.naive2.map(|p| p.0)));
        let n2_mase = mean_defined(per_window.iter().map(|m| m.naive2.and_then(|p| p.1)));
        if let (Some(a), Some(b), Some(c), Some(d)) = (report.smape, report.mase, n2_smape, n2_mase) {
            report.owa = owa(a, b, c, d);
        }
    }
    Ok(Evaluation { report, per_window })
}

/// Forecast every window with `model` and score the result.
pub fn evaluate_model(model: &ForecastModel, windows: &[Window], config: &MetricsConfig) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::validation("no windows to evaluate"));
    }
    let prepared = model.prepare_all(windows)?;
    let forecasts = model.forecast_all(&prepared, config.batch_size)?;
    evaluate_forecasts(windows, &forecasts, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mse_mae_examples() {
        assert_eq!(mse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(mse_mae(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), (1.0, 1.0));
        let (mse, mae) = mse_mae(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!(close(mse, 2.0 / 3.0, 1e-15) && close(mae, 2.0 / 3.0, 1e-15));
        assert!(mse_mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn smape_examples() {
        assert_eq!(smape(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert!(close(smape(&[1.0, 1.0], &[2.0, 2.0]).unwrap(), 66.6667, 1e-4));
        assert_eq!(smape(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn mase_examples() {
        assert_eq!(mase(&[5.0], &[6.0], &[1.0, 2.0, 3.0, 4.0], 1).unwrap(), Some(1.0));
        assert_eq!(mase(&[5.0], &[5.0], &[1.0, 2.0, 3.0, 4.0], 1).unwrap(), Some(0.0));
        assert_eq!(mase(&[5.0], &[6.0], &[2.0; 5], 1).unwrap(), None);
        assert!(mase(&[5.0], &[6.0], &[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn owa_examples() {
        assert_eq!(owa(3.0, 2.0, 3.0, 2.0), Some(1.0));
        assert_eq!(owa(6.0, 4.0, 3.0, 2.0), Some(2.0));
        assert_eq!(owa(1.0, 3.0, 2.0, 2.0), Some(1.0));
        assert_eq!(owa(1.0, 1.0, 0.0, 1.0), None);
    }

    #[test]
    fn naive2_non_seasonal_and_empty() {
        assert_eq!(naive2_forecast(&[1.0, 2.0, 3.0], 1, 3).unwrap(), [3.0; 3]);
        assert!(naive2_forecast(&[1.0, 2.0, 3.0], 3, 0).unwrap().is_empty());
    }

    #[test]
    fn naive2_repeats_the_season() {
        let x: Vec<f64> = (0..8).map(|t| if t % 2 == 0 { 10.0 } else { 20.0 }).collect();
        let f = naive2_forecast(&x, 2, 4).unwrap();
        for (a, b) in f.iter().zip([10.0, 20.0, 10.0, 20.0]) {
            assert!(close(*a, b, 1e-12), "{f:?}");
        }
        // at s = 4 the 8-point series is too short for the test; 16 points pass
        assert_eq!(naive2_forecast(&x, 4, 2).unwrap(), [20.0, 20.0]);
        let x: Vec<f64> = (0..16).map(|t| [10.0, 20.0, 30.0, 20.0][t % 4]).collect();
        let idx = seasonal_indices(&x, 4);
        for (a, b) in idx.iter().zip([0.5, 1.0, 1.5, 1.0]) {
            assert!(close(*a, b, 1e-12), "{idx:?}");
        }
        let f = naive2_forecast(&x, 4, 5).unwrap();
        for (a, b) in f.iter().zip([10.0, 20.0, 30.0, 20.0, 10.0]) {
            assert!(close(*a, b, 1e-12), "{f:?}");
        }
    }

    #[test]
    fn naive2_falls_back_on_non_positive_data() {
        let x: Vec<f64> = (0..16).map(|t| [-1.0, 1.0, 3.0, 1.0][t % 4]).collect();
        assert_eq!(naive2_forecast(&x, 4, 2).unwrap(), [1.0, 1.0]);
    }

    fn window(channel: usize, input: Vec<f64>, target: Vec<f64>) -> Window {
        Window {
            channel,
            offset: 0,
            input,
            target,
        }
    }

    #[test]
    fn aggregation_and_oracle() {
        let ws = vec![
            window(0, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0]),
            window(1, vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0]),
        ];
        let cfg = MetricsConfig {
            seasonality: 1,
            ..MetricsConfig::default()
        };
        let e = evaluate_forecasts(&ws, &[vec![1.0, -1.0], vec![3.0_f64.sqrt(), -(3.0_f64.sqrt())]], &cfg).unwrap();
        assert!(close(e.report.mse, 2.0, 1e-12));
        let targets: Vec<Vec<f64>> = ws.iter().map(|w| w.target.clone()).collect();
        let e = evaluate_forecasts(&ws, &targets, &MetricsConfig {
            mode: MetricsMode::Short,
            ..cfg
        })
        .unwrap();
        assert_eq!((e.report.mse, e.report.mae), (0.0, 0.0));
        assert_eq!(e.report.smape, Some(0.0));
        assert_eq!(e.report.mase, Some(0.0));
    }

    #[test]
    fn naive2_scores_one_against_itself() {
        let series: Vec<f64> = (0..70).map(|t| 10.0 + (t as f64 * 0.9).sin() * 3.0 + t as f64 * 0.1).collect();
        let ws: Vec<Window> = (0..5)
            .map(|i| window(0, series[i * 5..i * 5 + 40].to_vec(), series[i * 5 + 40..i * 5 + 46].to_vec()))
            .collect();
        let cfg = MetricsConfig {
            mode: MetricsMode::Short,
            seasonality: 7,
            ..MetricsConfig::default()
        };
        let f: Vec<Vec<f64>> = ws
            .iter()
            .map(|w| naive2_forecast(&w.input, 7, 6).unwrap())
            .collect();
        let e = evaluate_forecasts(&ws, &f, &cfg).unwrap();
        assert_eq!(e.report.owa, Some(1.0));
    }

    #[test]
    fn per_window_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.csv");
        let ws = vec![window(3, vec![1.0, 2.0], vec![1.0])];
        let e = evaluate_forecasts(&ws, &[vec![2.0]], &MetricsConfig::default()).unwrap();
        e.write_per_window_csv(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "window_id,channel,mse,mae\n0,3,1,1\n");
    }
}
