//! Adam with global-norm clipping, seeded shuffling and early stopping on
//! validation MSE.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ForecastModel, PreparedWindow};
use crate::tensor::{Parameterized, Tape, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop once this many consecutive epochs fail to improve val MSE, plus one.
    pub early_stop_patience: usize,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    /// Batch size used for validation forecasts.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            early_stop_patience: 3,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            grad_clip: 1.0,
            eval_batch_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.eval_batch_size == 0 {
            return bad("eval_batch_size", "must be at least 1".into());
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam_betas", format!("({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive".into());
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip", "must be ≥ 0".into());
        }
        Ok(())
    }
}

/// Adam with bias correction. State is keyed by tensor identity.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<TensorId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam {
            learning_rate,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.learning_rate, c.adam_betas, c.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Update every trainable tensor holding a gradient, then clear all
    /// gradients. Nothing moves if any gradient is non-finite.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        check_finite(model)?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |_, p| {
            if !p.requires_grad() {
                return;
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                return;
            };
            let (m, v) = moments
                .entry(p.id())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for ((x, gi), (mi, vi)) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        });
        model.zero_grads();
        Ok(())
    }
}

fn check_finite<M: Parameterized + ?Sized>(model: &M) -> Result<()> {
    let mut bad = None;
    model.visit_params(&mut |name, p| {
        if bad.is_some() {
            return;
        }
        if let Some(g) = p.grad() {
            if g.iter().any(|v| !v.is_finite()) {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                bad = Some(Error::NonFiniteGradient {
                    param: name.to_string(),
                    norm,
                });
            }
        }
    });
    bad.map_or(Ok(()), Err)
}

/// Rescale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<M: Parameterized + ?Sized>(model: &mut M, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params(&mut |_, p| {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        model.visit_params_mut(&mut |_, p| p.scale_grad(scale));
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean joint loss over the epoch's batches.
    pub train_loss: f64,
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub steps: u64,
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    /// `epoch,train_loss,val_mse`; an empty validation set leaves `val_mse` blank.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_mse"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_mse.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tracks the best validation score and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Record an epoch's score; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score < self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale > self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// Mean squared error of the model's forecasts over `windows`.
pub fn mse_over(model: &ForecastModel, windows: &[PreparedWindow], chunk: usize) -> Result<f64> {
    let forecasts = model.forecast_all(windows, chunk)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (f, w) in forecasts.iter().zip(windows) {
        for (a, b) in f.iter().zip(&w.target) {
            total += (a - b) * (a - b);
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

fn snapshot(model: &ForecastModel) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, t| out.push(t.data().to_vec()));
    out
}

fn restore(model: &mut ForecastModel, snap: &[Vec<f64>]) -> Result<()> {
    let mut it = snap.iter();
    model.visit_params_mut(&mut |_, t| {
        if let Some(d) = it.next() {
            t.set_data(d.clone()).expect("snapshot of the same model");
        }
    });
    model.refresh_anchors()
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Saved every time validation improves, so a later failure leaves the
    /// last good model on disk.
    pub checkpoint: Option<PathBuf>,
}

pub fn train(
    model: &mut ForecastModel,
    train_set: &[PreparedWindow],
    val_set: &[PreparedWindow],
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, val_set, config, &TrainOptions::default())
}

/// Minimise the joint loss. The parameters of the best validation epoch are
/// restored at the end; without validation data the last epoch is kept.
pub fn train_with(
    model: &mut ForecastModel,
    train_set: &[PreparedWindow],
    val_set: &[PreparedWindow],
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let started = Instant::now();
    let mut adam = Adam::from_config(config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xd50f_0a11);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = snapshot(model);
    let mut epochs = Vec::new();
    model.zero_grads();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut mse_sum, mut batches) = (0.0, 0.0, 0usize);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedWindow> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut tape = Tape::new();
            let parts = model.joint_loss(&mut tape, &batch, Some(&mut dropout_rng))?;
            let loss = tape.scalar_value(parts.loss);
            if !loss.is_finite() {
                restore(model, &best)?;
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            let grads = tape.backward(parts.loss)?;
            model.accumulate_grads(&grads)?;
            clip_grad_norm(model, config.grad_clip);
            if let Err(e) = adam.step(model) {
                restore(model, &best)?;
                return Err(e);
            }
            model.refresh_anchors()?;
            loss_sum += loss;
            mse_sum += tape.scalar_value(parts.mse);
            batches += 1;
        }
        let val_mse = if val_set.is_empty() {
            None
        } else {
            Some(mse_over(model, val_set, config.eval_batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            train_mse: mse_sum / batches as f64,
            val_mse,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_mse {}",
            record.train_loss,
            val_mse.map_or("-".to_string(), |v| format!("{v:.6}"))
        );
        epochs.push(record);

        match val_mse {
            Some(v) => {
                if stopper.observe(epoch, v) {
                    best = snapshot(model);
                    if let Some(path) = &options.checkpoint {
                        save_checkpoint(model, path)?;
                    }
                }
                if stopper.should_stop() {
                    break;
                }
            }
            None => {
                best = snapshot(model);
                if let Some(path) = &options.checkpoint {
                    save_checkpoint(model, path)?;
                }
            }
        }
    }
    restore(model, &best)?;
    let best_epoch = if val_set.is_empty() {
        epochs.len()
    } else {
        stopper.best_epoch()
    };
    Ok(TrainReport {
        epochs,
        best_epoch,
        steps: adam.steps(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_by_hand() {
        let mut p = vec![Tensor::scalar(0.0).with_requires_grad(true)];
        p[0].accumulate_grad(&[1.0]).unwrap();
        let mut adam = Adam::new(0.1, (0.9, 0.999), 1e-8);
        adam.step(&mut p).unwrap();
        assert_eq!(p[0].data()[0], -0.1 / (1.0 + 1e-8));
        assert!(p[0].grad().is_none());
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0]).with_requires_grad(true)];
        p[0].accumulate_grad(&[0.0, 0.0]).unwrap();
        Adam::new(0.1, (0.9, 0.999), 1e-8).step(&mut p).unwrap();
        assert_eq!(p[0].data(), [1.0, -2.0]);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = vec![
            Tensor::scalar(0.0).with_requires_grad(true),
            Tensor::scalar(0.0).with_requires_grad(true),
        ];
        p[1].accumulate_grad(&[f64::NAN]).unwrap();
        match Adam::new(0.1, (0.9, 0.999), 1e-8).step(&mut p) {
            Err(Error::NonFiniteGradient { param, .. }) => assert_eq!(param, "param.1"),
            other => panic!("{other:?}"),
        }
        assert_eq!(p[0].data()[0], 0.0);
    }

    #[test]
    fn clipping_scales_to_the_ceiling() {
        let mut p = vec![Tensor::from_vec(vec![0.0, 0.0]).with_requires_grad(true)];
        p[0].accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
        let g = p[0].grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn patience_zero_stops_at_first_stall() {
        let mut s = EarlyStopping::new(0);
        assert!(s.observe(1, 1.0));
        assert!(!s.should_stop());
        assert!(!s.observe(2, 1.5));
        assert!(s.should_stop());
        let mut s = EarlyStopping::new(2);
        s.observe(1, 1.0);
        s.observe(2, 2.0);
        s.observe(3, 2.0);
        assert!(!s.should_stop());
        s.observe(4, 2.0);
        assert!(s.should_stop());
        assert_eq!(s.best_epoch(), 1);
    }

    fn data(model: &ForecastModel, n: usize, shift: f64) -> Vec<PreparedWindow> {
        (0..n)
            .map(|i| {
                let s: Vec<f64> = (0..40)
                    .map(|t| ((t + i) as f64 * 0.785 + shift).sin())
                    .collect();
                model.prepare(0, &s[..32], &s[32..]).unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_validation_runs_every_epoch_and_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut model = ForecastModel::new(ModelConfig::tiny(), 3).unwrap();
            let train_set = data(&model, 10, 0.0);
            let report = train(&mut model, &train_set, &[], &cfg).unwrap();
            (report, snapshot(&model))
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.epochs.len(), 3);
        assert_eq!(a.best_epoch, 3);
        assert_eq!(a.train_losses(), b.train_losses());
        assert_eq!(pa, pb);
    }

    #[test]
    fn frozen_tensors_never_move() {
        let mut model = ForecastModel::new(ModelConfig::tiny(), 3).unwrap();
        let before: Vec<(String, Vec<f64>)> = model
            .backbone()
            .named_parameters()
            .into_iter()
            .map(|(n, t)| (n, t.data().to_vec()))
            .collect();
        let train_set = data(&model, 12, 0.3);
        let val_set = data(&model, 4, 1.1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        train(&mut model, &train_set, &val_set, &cfg).unwrap();
        let mut changed = Vec::new();
        for ((name, old), (_, t)) in before.iter().zip(model.backbone().named_parameters()) {
            if name.contains("attn") || name.contains("ffn") {
                assert_eq!(old.as_slice(), t.data(), "{name}");
            } else if old.as_slice() != t.data() {
                changed.push(name.clone());
            }
        }
        assert!(changed.contains(&"pos_embedding".to_string()));
        assert!(changed.iter().any(|n| n.contains("ln")));
    }

    #[test]
    fn report_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let report = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_mse: 0.5,
                val_mse: None,
            }],
            best_epoch: 1,
            steps: 1,
            wall_clock_seconds: 0.0,
        };
        report.write_csv(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "epoch,train_loss,val_mse\n1,0.5,\n");
    }
}
