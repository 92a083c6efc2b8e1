//! Run configuration, data assembly and the command implementations behind
//! the `s2ip` binary.
//!
//! Artifacts are written under the output directory with fixed names:
//!
//! | command             | files                                                   |
//! |---------------------|---------------------------------------------------------|
//! | `train`             | `model.s2ip`, `train_report.csv`                        |
//! | `evaluate`          | `metrics.csv`, `per_window.csv`                         |
//! | `forecast`          | `forecast.csv`                                          |
//! | `ablate`            | `ablation.csv`                                          |
//! | `gen-data`          | `synthetic.csv`                                         |
//! | `export-embeddings` | `anchors.tensor`, `ts_embeds.tensor`, `prompted_embeds.tensor` |

mod synthetic;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, Evaluation, MetricReport, MetricsConfig, MetricsMode};
use crate::model::{load_checkpoint, save_checkpoint, ForecastModel, ModelConfig};
use crate::prompt::EmbeddingMatrix;
use crate::series::{
    chronological_split, few_shot_truncate, load_csv, windows, LoadOptions, SeriesFrame, SplitSpec,
    Standardizer, Timestamp, Window, WindowSpec,
};
use crate::tensor::{io, Tape, Tensor};
use crate::training::{train_with, TrainConfig, TrainOptions, TrainReport};

pub use synthetic::{generate, SyntheticConfig};

pub const CHECKPOINT_FILE: &str = "model.s2ip";
pub const TRAIN_REPORT_FILE: &str = "train_report.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PER_WINDOW_FILE: &str = "per_window.csv";
pub const FORECAST_FILE: &str = "forecast.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const SYNTHETIC_FILE: &str = "synthetic.csv";
pub const ANCHORS_FILE: &str = "anchors.tensor";
pub const TS_EMBEDS_FILE: &str = "ts_embeds.tensor";
pub const PROMPTED_EMBEDS_FILE: &str = "prompted_embeds.tensor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// CSV to read; the synthetic generator is used when absent.
    pub path: Option<PathBuf>,
    pub forward_fill: bool,
    pub synthetic: SyntheticConfig,
    /// Window stride on validation and test parts.
    pub eval_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            forward_fill: false,
            synthetic: SyntheticConfig::default(),
            eval_stride: 1,
        }
    }
}

/// Optional external inputs; generated or random stand-ins otherwise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssetsConfig {
    /// Record file with a single `E` tensor (`V × D`).
    pub embeddings: Option<PathBuf>,
    /// Backbone weight file with one record per parameter.
    pub backbone_weights: Option<PathBuf>,
    /// Checkpoint for `evaluate`, `forecast` and `export-embeddings`;
    /// defaults to `model.s2ip` in the output directory.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Also run the decomposition-only cell, completing the 2×2 grid.
    pub full_grid: bool,
    /// Horizons to repeat the feature cells for; empty means the model's.
    pub horizons: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub prompt_ks: Vec<usize>,
    pub n_anchors: Vec<usize>,
    /// Seeds per cell (`seed`, `seed + 1`, …); metrics are averaged.
    pub repeats: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            full_grid: false,
            horizons: Vec::new(),
            lambdas: Vec::new(),
            prompt_ks: Vec::new(),
            n_anchors: Vec::new(),
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportConfig {
    /// Test windows whose embeddings are exported.
    pub max_windows: usize,
}

impl Default for ExportConfig {
    fn default() -> Self {
        ExportConfig { max_windows: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub assets: AssetsConfig,
    pub ablation: AblationConfig,
    pub export: ExportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            assets: AssetsConfig::default(),
            ablation: AblationConfig::default(),
            export: ExportConfig::default(),
        }
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { key, message } => Error::Config {
            key: format!("{section}.{key}"),
            message,
        },
        other => Error::Config {
            key: section.to_string(),
            message: other.to_string(),
        },
    }
}

impl RunConfig {
    /// Structural checks that do not need the data. `model.n_channels` is
    /// filled in from the data at run time.
    pub fn validate(&self) -> Result<()> {
        self.split.validate().map_err(|e| prefixed("split", e))?;
        self.model.validate().map_err(|e| prefixed("model", e))?;
        self.train.validate().map_err(|e| prefixed("train", e))?;
        self.data
            .synthetic
            .validate()
            .map_err(|e| prefixed("data.synthetic", e))?;
        if self.data.eval_stride == 0 {
            return Err(Error::Config {
                key: "data.eval_stride".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.metrics.batch_size == 0 {
            return Err(Error::Config {
                key: "metrics.batch_size".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.ablation.repeats == 0 {
            return Err(Error::Config {
                key: "ablation.repeats".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("cannot serialise config: {e}")))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.assets
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join(CHECKPOINT_FILE))
    }
}

/// Dotted path of the key on the line containing byte `offset`.
fn key_at(source: &str, offset: usize) -> Option<String> {
    let mut table = String::new();
    let mut start = 0;
    for line in source.split_inclusive('\n') {
        let end = start + line.len();
        let trimmed = line.trim();
        if trimmed.starts_with('[') {
            table = trimmed.trim_matches(|c| c == '[' || c == ']').trim().to_string();
        }
        if offset < end.max(start + 1) {
            let key = trimmed.split('=').next()?.trim();
            if key.is_empty() || trimmed.starts_with('[') || !trimmed.contains('=') {
                return (!table.is_empty()).then_some(table);
            }
            return Some(if table.is_empty() {
                key.to_string()
            } else {
                format!("{table}.{key}")
            });
        }
        start = end;
    }
    None
}

/// Strict parse: unknown keys and type mismatches are errors naming the key.
pub fn parse_config_str(source: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(source).map_err(|e| Error::Config {
        key: e
            .span()
            .and_then(|s| key_at(source, s.start))
            .unwrap_or_else(|| "<root>".to_string()),
        message: e.message().to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    parse_config_str(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Train,
    Evaluate,
    Forecast,
    Ablate,
    GenData,
    ExportEmbeddings,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::Train,
        Command::Evaluate,
        Command::Forecast,
        Command::Ablate,
        Command::GenData,
        Command::ExportEmbeddings,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Forecast => "forecast",
            Command::Ablate => "ablate",
            Command::GenData => "gen-data",
            Command::ExportEmbeddings => "export-embeddings",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown command `{s}`")))
    }
}

/// Data split into standardised windows.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Standardised (long mode) or raw (short mode) full series.
    pub frame: SeriesFrame,
    pub standardizer: Standardizer,
    pub train_rows: usize,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

pub fn load_frame(config: &DataConfig) -> Result<SeriesFrame> {
    match &config.path {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
            load_csv(
                path,
                LoadOptions {
                    forward_fill: config.forward_fill,
                },
            )
        }
        None => generate(&config.synthetic),
    }
}

/// Windows whose targets lie in `[start, end)`; inputs may reach back
/// `lookback` rows before `start`.
fn part_windows(frame: &SeriesFrame, start: usize, end: usize, spec: WindowSpec) -> Vec<Window> {
    let from = start.saturating_sub(spec.lookback);
    let mut out = windows(&frame.slice(from, end), &spec);
    for w in &mut out {
        w.offset += from;
    }
    out
}

/// Split, optionally truncate for few-shot, standardise on the training rows
/// (long mode only) and cut windows.
pub fn build_dataset(frame: SeriesFrame, config: &RunConfig) -> Result<Dataset> {
    let split = chronological_split(&frame, &config.split)?;
    let full_train = split.train.len();
    let val_end = full_train + split.val.len();
    let train_frame = match config.split.few_shot {
        Some(f) => few_shot_truncate(&split.train, f)?,
        None => split.train,
    };
    let standardizer = match config.metrics.mode {
        MetricsMode::Long => Standardizer::fit(&train_frame)?,
        MetricsMode::Short => Standardizer::identity(frame.n_channels()),
    };
    let frame = standardizer.transform(&frame);
    let spec = config.model.window;
    let eval = WindowSpec {
        stride: config.data.eval_stride,
        ..spec
    };
    let train = windows(&frame.slice(0, train_frame.len()), &spec);
    let val = part_windows(&frame, full_train, val_end, eval);
    let test = part_windows(&frame, val_end, frame.len(), eval);
    if train.is_empty() {
        return Err(Error::validation(format!(
            "training part of {} rows is shorter than lookback + horizon = {}",
            train_frame.len(),
            spec.lookback + spec.horizon
        )));
    }
    Ok(Dataset {
        train_rows: train_frame.len(),
        frame,
        standardizer,
        train,
        val,
        test,
    })
}

/// A fresh model for `config` and `channels` data channels.
pub fn build_model(config: &RunConfig, channels: usize) -> Result<ForecastModel> {
    let mut model_config = config.model.clone();
    model_config.n_channels = channels;
    let seed = config.train.seed;
    let assets = &config.assets;
    if assets.embeddings.is_none() && assets.backbone_weights.is_none() {
        return ForecastModel::new(model_config, seed);
    }
    let embeddings = match &assets.embeddings {
        Some(p) => EmbeddingMatrix::load(p)?,
        None => {
            // same vocabulary a plain `ForecastModel::new` would generate
            ForecastModel::new(model_config.clone(), seed)?.embeddings().clone()
        }
    };
    let backbone = Backbone::init(model_config.backbone, seed, assets.backbone_weights.as_deref())?;
    ForecastModel::from_parts(model_config, embeddings, backbone, seed)
}

/// Train a fresh model and report on the test windows.
pub fn train_and_evaluate(
    config: &RunConfig,
    data: &Dataset,
    checkpoint: Option<&Path>,
) -> Result<(ForecastModel, TrainReport, Evaluation)> {
    let mut model = build_model(config, data.frame.n_channels())?;
    let train_set = model.prepare_all(&data.train)?;
    let val_set = model.prepare_all(&data.val)?;
    let options = TrainOptions {
        checkpoint: checkpoint.map(Path::to_path_buf),
    };
    let report = train_with(&mut model, &train_set, &val_set, &config.train, &options)?;
    let evaluation = evaluate_model(&model, &data.test, &config.metrics)?;
    Ok((model, report, evaluation))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub prompt: bool,
    pub decomposition: bool,
    pub lambda: f64,
    pub prompt_k: usize,
    pub n_anchors: usize,
    pub report: MetricReport,
}

impl AblationRow {
    pub fn write_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["cell", "prompt", "decomposition", "lambda", "prompt_k", "n_anchors"];
        header.extend(MetricReport::CSV_HEADER);
        w.write_record(&header)?;
        for r in rows {
            let mut row = vec![
                r.cell.clone(),
                r.prompt.to_string(),
                r.decomposition.to_string(),
                r.lambda.to_string(),
                r.prompt_k.to_string(),
                r.n_anchors.to_string(),
            ];
            row.extend(r.report.csv_fields());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn average(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&MetricReport) -> Option<f64>| {
        reports
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n)
    };
    MetricReport {
        mse: mean(&|r| r.mse),
        mae: mean(&|r| r.mae),
        smape: mean_opt(&|r| r.smape),
        mape: mean_opt(&|r| r.mape),
        mase: mean_opt(&|r| r.mase),
        owa: mean_opt(&|r| r.owa),
        horizon: reports[0].horizon,
        seasonality: reports[0].seasonality,
    }
}

/// The cells an ablation run covers, in output order.
pub fn ablation_cells(config: &RunConfig) -> Vec<(String, RunConfig)> {
    let horizons = if config.ablation.horizons.is_empty() {
        vec![config.model.window.horizon]
    } else {
        config.ablation.horizons.clone()
    };
    let feature = |base: &RunConfig, prompt: bool, decomposition: bool| {
        let mut c = base.clone();
        if !prompt {
            c.model.prompt_k = 0;
            c.model.lambda = 0.0;
        }
        c.model.decomposition.enabled = decomposition;
        c
    };
    let mut cells = Vec::new();
    for &h in &horizons {
        let mut base = config.clone();
        base.model.window.horizon = h;
        let mut grid = vec![
            ("neither", false, false),
            ("prompt", true, false),
            ("prompt+decomposition", true, true),
        ];
        if config.ablation.full_grid {
            grid.push(("decomposition", false, true));
        }
        for (label, p, d) in grid {
            cells.push((format!("{label}@h{h}"), feature(&base, p, d)));
        }
        for &l in &config.ablation.lambdas {
            let mut c = base.clone();
            c.model.lambda = l;
            cells.push((format!("lambda={l}@h{h}"), c));
        }
        for &k in &config.ablation.prompt_ks {
            let mut c = base.clone();
            c.model.prompt_k = k;
            cells.push((format!("prompt_k={k}@h{h}"), c));
        }
        for &v in &config.ablation.n_anchors {
            let mut c = base.clone();
            c.model.n_anchors = v;
            cells.push((format!("n_anchors={v}@h{h}"), c));
        }
    }
    cells
}

pub fn run_ablation(config: &RunConfig, frame: &SeriesFrame) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (cell, cfg) in ablation_cells(config) {
        cfg.validate().map_err(|e| Error::validation(format!("ablation cell {cell}: {e}")))?;
        let data = build_dataset(frame.clone(), &cfg)?;
        let mut reports = Vec::new();
        for r in 0..config.ablation.repeats {
            let mut seeded = cfg.clone();
            seeded.train.seed = cfg.train.seed + r as u64;
            let (_, _, evaluation) = train_and_evaluate(&seeded, &data, None)?;
            reports.push(evaluation.report);
        }
        let report = average(&reports);
        log::info!("ablation {cell}: mse {:.6} mae {:.6}", report.mse, report.mae);
        rows.push(AblationRow {
            cell,
            prompt: cfg.model.prompt_k > 0,
            decomposition: cfg.model.decomposition.enabled,
            lambda: cfg.model.lambda,
            prompt_k: cfg.model.prompt_k,
            n_anchors: cfg.model.n_anchors,
            report,
        });
    }
    Ok(rows)
}

fn load_trained(config: &RunConfig) -> Result<ForecastModel> {
    let path = config.checkpoint_path();
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    load_checkpoint(&path)
}

/// Forecast `τ′` steps past the end of `frame` for every channel, in the
/// original units. Rows are `(timestamp, channel, value)`.
pub fn forecast_future(
    model: &ForecastModel,
    data: &Dataset,
    raw_names: &[String],
) -> Result<Vec<(Timestamp, String, f64)>> {
    let cfg = model.config();
    let (lookback, horizon) = (cfg.window.lookback, cfg.window.horizon);
    let frame = &data.frame;
    if frame.len() < lookback {
        return Err(Error::validation(format!(
            "series of {} rows is shorter than lookback {lookback}",
            frame.len()
        )));
    }
    let ts = frame.timestamps();
    let last = ts[ts.len() - 1];
    let prev = (ts.len() >= 2).then(|| ts[ts.len() - 2]);
    let mut rows = Vec::with_capacity(horizon * frame.n_channels());
    for c in 0..frame.n_channels() {
        let col = frame.channel(c);
        let w = model.prepare(c, &col[col.len() - lookback..], &[])?;
        let f = model.forecast(&w)?;
        for (h, v) in f.iter().enumerate() {
            rows.push((
                Timestamp::extrapolate(prev, last, h as i64 + 1),
                raw_names[c].clone(),
                data.standardizer.inverse_value(c, *v),
            ));
        }
    }
    Ok(rows)
}

/// Anchors, patch embeddings and prompted sequences for up to `limit` test
/// windows.
pub fn export_embeddings(model: &ForecastModel, windows: &[Window], limit: usize) -> Result<[Tensor; 3]> {
    let take = &windows[..windows.len().min(limit)];
    if take.is_empty() {
        return Err(Error::validation("no windows to export"));
    }
    let prepared = model.prepare_all(take)?;
    let refs: Vec<_> = prepared.iter().collect();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &refs, None)?;
    Ok([
        tape.to_tensor(pass.anchors),
        tape.to_tensor(pass.ts_embed),
        tape.to_tensor(pass.prompted),
    ])
}

/// Execute `command`, returning the artifacts written.
pub fn run(command: Command, config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    match command {
        Command::GenData => {
            let path = out.join(SYNTHETIC_FILE);
            generate(&config.data.synthetic)?.write_csv(&path)?;
            written.push(path);
        }
        Command::Train => {
            let data = build_dataset(load_frame(&config.data)?, config)?;
            let ckpt = config.checkpoint_path();
            let (model, report, _) = train_and_evaluate(config, &data, Some(&ckpt))?;
            save_checkpoint(&model, &ckpt)?;
            let report_path = out.join(TRAIN_REPORT_FILE);
            report.write_csv(&report_path)?;
            written.extend([ckpt, report_path]);
        }
        Command::Evaluate => {
            let model = load_trained(config)?;
            let data = build_dataset(load_frame(&config.data)?, config)?;
            let evaluation = evaluate_model(&model, &data.test, &config.metrics)?;
            let metrics = out.join(METRICS_FILE);
            let per_window = out.join(PER_WINDOW_FILE);
            evaluation.report.write_csv(&metrics)?;
            evaluation.write_per_window_csv(&per_window)?;
            written.extend([metrics, per_window]);
        }
        Command::Forecast => {
            let model = load_trained(config)?;
            let frame = load_frame(&config.data)?;
            let names = frame.channel_names().to_vec();
            let data = build_dataset(frame, config)?;
            let rows = forecast_future(&model, &data, &names)?;
            let path = out.join(FORECAST_FILE);
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["timestamp", "channel", "value"])?;
            for (t, c, v) in rows {
                w.write_record([t.to_string(), c, v.to_string()])?;
            }
            w.flush()?;
            written.push(path);
        }
        Command::Ablate => {
            let rows = run_ablation(config, &load_frame(&config.data)?)?;
            let path = out.join(ABLATION_FILE);
            AblationRow::write_csv(&rows, &path)?;
            written.push(path);
        }
        Command::ExportEmbeddings => {
            let model = load_trained(config)?;
            let data = build_dataset(load_frame(&config.data)?, config)?;
            let tensors = export_embeddings(&model, &data.test, config.export.max_windows)?;
            for (t, name) in tensors.iter().zip([ANCHORS_FILE, TS_EMBEDS_FILE, PROMPTED_EMBEDS_FILE]) {
                let path = out.join(name);
                io::save_tensor(&path, t)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config_str("").unwrap(), RunConfig::default());
    }

    #[test]
    fn bad_keys_are_named() {
        let err = parse_config_str("[model]\nprompt_k = -1\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "model.prompt_k"), "{err}");
        let err = parse_config_str("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rat"), "{err}");
        let err = parse_config_str("[model]\nprompt_k = 64\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "model.prompt_k"), "{err}");
        let err = parse_config_str("[model.backbone]\nn_heads = \"four\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { key, .. } if key == "model.backbone.n_heads"), "{err}");
    }

    #[test]
    fn serialise_then_parse_round_trips() {
        let mut c = RunConfig::default();
        c.model.lambda = 0.05;
        c.split.few_shot = Some(0.1);
        c.data.path = Some(PathBuf::from("data/x.csv"));
        c.ablation.lambdas = vec![0.0, 0.02];
        c.metrics.mode = MetricsMode::Short;
        let text = c.to_toml().unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), c);
    }

    #[test]
    fn command_names_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("fit".parse::<Command>().is_err());
    }

    #[test]
    fn evaluation_windows_borrow_lookback_context() {
        let frame = generate(&SyntheticConfig {
            length: 300,
            channels: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.model.window = WindowSpec {
            lookback: 24,
            horizon: 6,
            stride: 1,
        };
        let data = build_dataset(frame, &cfg).unwrap();
        // 210 / 30 / 60 rows
        assert_eq!(data.train.len(), 210 - 30 + 1);
        assert_eq!(data.val.len(), 30 - 6 + 1);
        assert_eq!(data.val[0].offset, 210 - 24);
        assert_eq!(data.test.len(), 60 - 6 + 1);
        let col = data.frame.channel(0);
        assert_eq!(data.test[0].target[0], col[240]);
    }

    #[test]
    fn ablation_cells_follow_the_table_layout() {
        let mut cfg = RunConfig::default();
        cfg.ablation.horizons = vec![24, 48];
        let cells = ablation_cells(&cfg);
        assert_eq!(cells.len(), 6);
        let (_, c) = &cells[0];
        assert_eq!((c.model.prompt_k, c.model.decomposition.enabled), (0, false));
        let (_, c) = &cells[4];
        assert_eq!(c.model.window.horizon, 48);
        assert_eq!((c.model.prompt_k, c.model.decomposition.enabled), (4, false));
        cfg.ablation.full_grid = true;
        cfg.ablation.lambdas = vec![0.0, 0.05];
        assert_eq!(ablation_cells(&cfg).len(), 12);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        assert!(matches!(run(Command::Evaluate, &cfg), Err(Error::MissingFile(_))));
    }
}
