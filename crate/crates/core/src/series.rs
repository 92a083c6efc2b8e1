//! Loading, validating, splitting and windowing multivariate series.
//!
//! Channels are treated independently: [`windows`] emits univariate
//! `(channel, input, target)` triples and nothing downstream mixes channels.

use std::fmt;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Timestamp {
    Index(i64),
    DateTime(NaiveDateTime),
}

const DATETIME_FORMATS: &[&str] = &[
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%dT%H:%M:%S%.f",
];

impl Timestamp {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<i64>() {
            return Some(Timestamp::Index(i));
        }
        for fmt in DATETIME_FORMATS {
            if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
                return Some(Timestamp::DateTime(dt));
            }
        }
        if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
            return Some(Timestamp::DateTime(dt.naive_utc()));
        }
        NaiveDate::parse_from_str(s, "%Y-%m-%d")
            .ok()
            .and_then(|d| d.and_hms_opt(0, 0, 0))
            .map(Timestamp::DateTime)
    }

    /// Extrapolate `steps` increments of `last − prev` past `last`.
    pub fn extrapolate(prev: Option<Timestamp>, last: Timestamp, steps: i64) -> Timestamp {
        match (prev, last) {
            (Some(Timestamp::Index(p)), Timestamp::Index(l)) => Timestamp::Index(l + steps * (l - p)),
            (None, Timestamp::Index(l)) => Timestamp::Index(l + steps),
            (Some(Timestamp::DateTime(p)), Timestamp::DateTime(l)) => {
                Timestamp::DateTime(l + (l - p) * steps as i32)
            }
            (_, Timestamp::DateTime(l)) => Timestamp::DateTime(l + Duration::hours(steps)),
            (Some(Timestamp::DateTime(_)), Timestamp::Index(l)) => Timestamp::Index(l + steps),
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Timestamp::Index(i) => write!(f, "{i}"),
            Timestamp::DateTime(dt) => write!(f, "{}", dt.format("%Y-%m-%d %H:%M:%S")),
        }
    }
}

/// `T × N` series with strictly increasing timestamps and no gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    timestamps: Vec<Timestamp>,
    /// Row-major `T × N`.
    values: Vec<f64>,
    channel_names: Vec<String>,
}

impl SeriesFrame {
    pub fn new(timestamps: Vec<Timestamp>, values: Vec<f64>, channel_names: Vec<String>) -> Result<Self> {
        let n = channel_names.len();
        if n == 0 {
            return Err(Error::validation("a series needs at least one channel"));
        }
        if values.len() != timestamps.len() * n {
            return Err(Error::validation(format!(
                "{} values cannot fill {} rows × {} channels",
                values.len(),
                timestamps.len(),
                n
            )));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::validation(format!(
                "timestamps not strictly increasing at row {} ({} then {})",
                i + 1,
                timestamps[i],
                timestamps[i + 1]
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "non-finite value at row {}, channel {}",
                i / n,
                i % n
            )));
        }
        Ok(SeriesFrame {
            timestamps,
            values,
            channel_names,
        })
    }

    /// Build from per-channel columns with integer timestamps `0..T`.
    pub fn from_columns(columns: &[Vec<f64>], names: Option<Vec<String>>) -> Result<Self> {
        let t = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != t) {
            return Err(Error::validation("columns have different lengths"));
        }
        let n = columns.len();
        let mut values = Vec::with_capacity(t * n);
        for row in 0..t {
            values.extend(columns.iter().map(|c| c[row]));
        }
        let names = names.unwrap_or_else(|| (0..n).map(|i| format!("ch{i}")).collect());
        let timestamps = (0..t as i64).map(Timestamp::Index).collect();
        Self::new(timestamps, values, names)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn timestamps(&self) -> &[Timestamp] {
        &self.timestamps
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * self.n_channels() + channel]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.n_channels();
        &self.values[row * n..(row + 1) * n]
    }

    pub fn channel(&self, channel: usize) -> Vec<f64> {
        (0..self.len()).map(|r| self.value(r, channel)).collect()
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> SeriesFrame {
        let n = self.n_channels();
        SeriesFrame {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start * n..end * n].to_vec(),
            channel_names: self.channel_names.clone(),
        }
    }

    /// Apply `f(channel, value)` to every element.
    pub fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> SeriesFrame {
        let n = self.n_channels();
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| f(i % n, v))
            .collect();
        SeriesFrame {
            timestamps: self.timestamps.clone(),
            values,
            channel_names: self.channel_names.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.channel_names.iter().cloned());
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec = vec![self.timestamps[r].to_string()];
            rec.extend(self.row(r).iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Fill empty cells with the previous row's value instead of rejecting.
    pub forward_fill: bool,
}

/// Read a CSV whose first column is a timestamp (integer or ISO-8601) and
/// whose remaining columns are real-valued channels.
pub fn load_csv(path: &Path, options: LoadOptions) -> Result<SeriesFrame> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::validation(
            "CSV needs a timestamp column and at least one value column",
        ));
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let n = names.len();

    let mut timestamps = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        if record.len() != n + 1 {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", n + 1, record.len()),
            });
        }
        let ts = Timestamp::parse(&record[0]).ok_or_else(|| Error::Parse {
            row,
            message: format!("unparseable timestamp {:?}", &record[0]),
        })?;
        for (c, field) in record.iter().skip(1).enumerate() {
            let field = field.trim();
            let v = if field.is_empty() {
                if !options.forward_fill {
                    return Err(Error::Parse {
                        row,
                        message: format!("missing value in column {:?}", names[c]),
                    });
                }
                let prev = values.len().checked_sub(n).ok_or_else(|| Error::Parse {
                    row,
                    message: format!("missing value in column {:?} with nothing to fill from", names[c]),
                })?;
                values[prev]
            } else {
                field.parse::<f64>().map_err(|_| Error::Parse {
                    row,
                    message: format!("not a number in column {:?}: {field:?}", names[c]),
                })?
            };
            values.push(v);
        }
        timestamps.push(ts);
    }
    if timestamps.is_empty() {
        return Err(Error::validation("CSV has no data rows"));
    }
    SeriesFrame::new(timestamps, values, names)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub few_shot: Option<f64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            few_shot: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::validation(format!("split.{name} = {f} is outside [0, 1]")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!("split fractions sum to {sum}, not 1")));
        }
        if let Some(f) = self.few_shot {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::validation(format!("split.few_shot = {f} is outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: SeriesFrame,
    pub val: SeriesFrame,
    pub test: SeriesFrame,
}

impl Split {
    /// Names of the parts too short to yield a single window.
    pub fn short_parts(&self, window: &WindowSpec) -> Vec<&'static str> {
        let need = window.lookback + window.horizon;
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
            .into_iter()
            .filter(|(_, f)| f.len() < need)
            .map(|(n, _)| n)
            .collect()
    }
}

fn floor_frac(fraction: f64, total: usize) -> usize {
    // tolerate representation error such as 0.29 * 100 = 28.999…
    (fraction * total as f64 + 1e-9).floor() as usize
}

/// Contiguous train / val / test split. Val and test take `floor(fraction·T)`
/// rows; the remainder goes to train.
pub fn chronological_split(frame: &SeriesFrame, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let t = frame.len();
    let n_val = floor_frac(spec.val, t);
    let n_test = floor_frac(spec.test, t);
    let n_train = t - n_val - n_test;
    Ok(Split {
        train: frame.slice(0, n_train),
        val: frame.slice(n_train, n_train + n_val),
        test: frame.slice(n_train + n_val, t),
    })
}

/// Keep the first `floor(fraction·T)` rows.
pub fn few_shot_truncate(train: &SeriesFrame, fraction: f64) -> Result<SeriesFrame> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation(format!("few-shot fraction {fraction} is outside (0, 1]")));
    }
    let keep = floor_frac(fraction, train.len());
    if keep == 0 {
        return Err(Error::validation(format!(
            "few-shot fraction {fraction} of {} rows leaves nothing",
            train.len()
        )));
    }
    Ok(train.slice(0, keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            lookback: 96,
            horizon: 24,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::validation(
                "window lookback, horizon and stride must be positive",
            ));
        }
        Ok(())
    }

    /// Closed-form count of windows per channel.
    pub fn count(&self, t: usize) -> usize {
        let need = self.lookback + self.horizon;
        if t < need {
            0
        } else {
            (t - need) / self.stride + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub channel: usize,
    /// Row of the first input step in the source frame.
    pub offset: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Channel-independent sliding windows, channel-major.
pub fn windows(frame: &SeriesFrame, spec: &WindowSpec) -> Vec<Window> {
    let mut out = Vec::new();
    let (lb, h) = (spec.lookback, spec.horizon);
    for channel in 0..frame.n_channels() {
        let col = frame.channel(channel);
        let mut offset = 0;
        while offset + lb + h <= col.len() {
            out.push(Window {
                channel,
                offset,
                input: col[offset..offset + lb].to_vec(),
                target: col[offset + lb..offset + lb + h].to_vec(),
            });
            offset += spec.stride;
        }
    }
    out
}

/// Per-channel z-scoring with statistics taken from a reference (train) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(frame: &SeriesFrame) -> Result<Self> {
        if frame.is_empty() {
            return Err(Error::validation("cannot fit a standardizer on an empty frame"));
        }
        let t = frame.len() as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for c in 0..frame.n_channels() {
            let col = frame.channel(c);
            let m = col.iter().sum::<f64>() / t;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t;
            mean.push(m);
            // constant channels pass through centred
            std.push(if v > 0.0 { v.sqrt() } else { 1.0 });
        }
        Ok(Standardizer { mean, std })
    }

    pub fn identity(channels: usize) -> Self {
        Standardizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn transform(&self, frame: &SeriesFrame) -> SeriesFrame {
        frame.map_values(|c, v| (v - self.mean[c]) / self.std[c])
    }

    pub fn inverse_value(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn csv_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn ramp(t: usize, n: usize) -> SeriesFrame {
        let cols: Vec<Vec<f64>> = (0..n)
            .map(|c| (0..t).map(|i| (i * 10 + c) as f64).collect())
            .collect();
        SeriesFrame::from_columns(&cols, None).unwrap()
    }

    #[test]
    fn loads_small_csv() {
        let f = csv_file("t,a,b\n1,1.0,2.0\n2,1.5,2.5\n3,2.0,3.0\n");
        let frame = load_csv(f.path(), LoadOptions::default()).unwrap();
        assert_eq!(frame.len(), 3);
        assert_eq!(frame.n_channels(), 2);
        assert_eq!(frame.channel_names(), ["a", "b"]);
        assert_eq!(frame.channel(1), vec![2.0, 2.5, 3.0]);
    }

    #[test]
    fn malformed_value_reports_file_row() {
        let f = csv_file("t,a,b\n1,1.0,2.0\n2,x,2.5\n3,2.0,3.0\n");
        match load_csv(f.path(), LoadOptions::default()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotonic_and_empty_are_rejected() {
        let f = csv_file("t,a\n1,1.0\n3,2.0\n2,3.0\n");
        assert!(matches!(
            load_csv(f.path(), LoadOptions::default()),
            Err(Error::Validation(_))
        ));
        let f = csv_file("t,a\n");
        assert!(matches!(
            load_csv(f.path(), LoadOptions::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn missing_values_rejected_or_forward_filled() {
        let f = csv_file("t,a,b\n1,1.0,2.0\n2,,2.5\n");
        assert!(matches!(
            load_csv(f.path(), LoadOptions::default()),
            Err(Error::Parse { row: 3, .. })
        ));
        let frame = load_csv(f.path(), LoadOptions { forward_fill: true }).unwrap();
        assert_eq!(frame.channel(0), vec![1.0, 1.0]);
    }

    #[test]
    fn iso_timestamps_parse() {
        let f = csv_file("date,x\n2016-07-01 00:00:00,1\n2016-07-01 01:00:00,2\n");
        let frame = load_csv(f.path(), LoadOptions::default()).unwrap();
        assert!(matches!(frame.timestamps()[0], Timestamp::DateTime(_)));
        let next = Timestamp::extrapolate(Some(frame.timestamps()[0]), frame.timestamps()[1], 1);
        assert_eq!(next.to_string(), "2016-07-01 02:00:00");
    }

    #[test]
    fn ett_shaped_file() {
        let mut s = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        let start = NaiveDate::from_ymd_opt(2016, 7, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        for i in 0..17_420i64 {
            let ts = start + Duration::hours(i);
            s.push_str(&ts.format("%Y-%m-%d %H:%M:%S").to_string());
            for c in 0..7 {
                s.push_str(&format!(",{}", (i as f64 * 0.01 + c as f64).sin()));
            }
            s.push('\n');
        }
        let f = csv_file(&s);
        let frame = load_csv(f.path(), LoadOptions::default()).unwrap();
        assert_eq!((frame.len(), frame.n_channels()), (17_420, 7));
    }

    #[test]
    fn split_sizes() {
        let spec = SplitSpec::default();
        let s = chronological_split(&ramp(100, 1), &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let s = chronological_split(&ramp(101, 1), &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (71, 10, 20));
        let all_train = SplitSpec {
            train: 1.0,
            val: 0.0,
            test: 0.0,
            few_shot: None,
        };
        let s = chronological_split(&ramp(10, 1), &all_train).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 0, 0));
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let bad = SplitSpec {
            train: 0.7,
            val: 0.2,
            test: 0.2,
            few_shot: None,
        };
        assert!(chronological_split(&ramp(10, 1), &bad).is_err());
    }

    #[test]
    fn short_parts_are_reported() {
        let s = chronological_split(&ramp(100, 1), &SplitSpec::default()).unwrap();
        let w = WindowSpec {
            lookback: 12,
            horizon: 4,
            stride: 1,
        };
        assert_eq!(s.short_parts(&w), vec!["val"]);
    }

    #[test]
    fn few_shot_counts() {
        assert_eq!(few_shot_truncate(&ramp(100, 1), 0.10).unwrap().len(), 10);
        let train = ramp(8545, 1);
        assert_eq!(few_shot_truncate(&train, 0.10).unwrap().len(), 854);
        assert_eq!(few_shot_truncate(&train, 0.05).unwrap().len(), 427);
        assert!(few_shot_truncate(&ramp(5, 1), 0.1).is_err());
        assert!(few_shot_truncate(&ramp(5, 1), 0.0).is_err());
    }

    #[test]
    fn window_counts() {
        let w = WindowSpec {
            lookback: 24,
            horizon: 12,
            stride: 1,
        };
        assert_eq!(windows(&ramp(100, 2), &w).len(), 2 * 65);
        assert_eq!(windows(&ramp(36, 1), &w).len(), 1);
        assert!(windows(&ramp(35, 1), &w).is_empty());
    }

    #[test]
    fn windows_are_adjacent_slices() {
        let frame = ramp(50, 2);
        let w = WindowSpec {
            lookback: 8,
            horizon: 3,
            stride: 5,
        };
        for win in windows(&frame, &w) {
            let col = frame.channel(win.channel);
            assert_eq!(win.input, col[win.offset..win.offset + 8]);
            assert_eq!(win.target, col[win.offset + 8..win.offset + 11]);
        }
    }

    #[test]
    fn standardizer_uses_reference_statistics() {
        let frame = SeriesFrame::from_columns(&[vec![1.0, 3.0]], None).unwrap();
        let s = Standardizer::fit(&frame).unwrap();
        assert_eq!(s.mean, vec![2.0]);
        assert_eq!(s.std, vec![1.0]);
        let other = SeriesFrame::from_columns(&[vec![5.0]], None).unwrap();
        assert_eq!(s.transform(&other).channel(0), vec![3.0]);
        assert_eq!(s.inverse_value(0, 3.0), 5.0);
    }
}
