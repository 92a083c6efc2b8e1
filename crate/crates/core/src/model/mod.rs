//! The assembled forecaster: tokenize → embed → prompt → backbone → project
//! → recombine → denormalise, and the joint training objective.
//!
//! Decomposition and patching are affine-equivariant, so each window is
//! tokenized once on its standardised form `z = (x − μ)/√(σ² + ε)`. The
//! RevIN gain and offset are applied on the tape as
//! `γ_c · token(z) + β_c · [1 | 0 | 0]`, which equals tokenizing
//! `γ_c · z + β_c` directly.

mod checkpoint;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, TrainabilityPolicy};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::preprocess::{
    build_meta_token, patch, revin_denormalize, revin_normalize, DecompositionConfig, PatchSpec,
    RevInState, DEFAULT_EPSILON,
};
use crate::prompt::{self, AnchorBank, EmbeddingMatrix, Pooling, PromptSelection};
use crate::series::{Window, WindowSpec};
use crate::tensor::{Parameterized, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub window: WindowSpec,
    pub patch: PatchSpec,
    pub decomposition: DecompositionConfig,
    pub backbone: BackboneConfig,
    pub policy: TrainabilityPolicy,
    /// Number of prefix anchors `K`. 0 disables prompting.
    pub prompt_k: usize,
    /// `V′`.
    pub n_anchors: usize,
    /// `V`, used when the vocabulary is generated rather than loaded.
    pub vocab_size: usize,
    pub vocab_clusters: usize,
    /// Weight of the alignment term.
    pub lambda: f64,
    /// Feed the K prompt output positions to the output projection too.
    pub include_prompt_in_output: bool,
    pub pooling: Pooling,
    /// One RevIN gain/offset pair per channel.
    pub n_channels: usize,
    pub revin_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: WindowSpec::default(),
            patch: PatchSpec::default(),
            decomposition: DecompositionConfig::default(),
            backbone: BackboneConfig::default(),
            policy: TrainabilityPolicy::FINE_TUNE_NORMS,
            prompt_k: 4,
            n_anchors: 32,
            vocab_size: 1000,
            vocab_clusters: 16,
            lambda: 0.01,
            include_prompt_in_output: false,
            pooling: Pooling::Mean,
            n_channels: 1,
            revin_eps: DEFAULT_EPSILON,
        }
    }
}

impl ModelConfig {
    /// The smallest configuration used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            window: WindowSpec {
                lookback: 32,
                horizon: 8,
                stride: 1,
            },
            decomposition: DecompositionConfig {
                period: 8,
                trend_window: 9,
                ..DecompositionConfig::default()
            },
            backbone: BackboneConfig {
                embed_dim: 16,
                n_layers: 1,
                n_heads: 2,
                max_seq_len: 16,
                ..BackboneConfig::default()
            },
            prompt_k: 2,
            n_anchors: 8,
            vocab_size: 50,
            vocab_clusters: 5,
            ..ModelConfig::default()
        }
    }

    pub fn n_patches(&self) -> usize {
        self.patch.n_patches(self.window.lookback)
    }

    pub fn token_width(&self) -> usize {
        3 * self.patch.patch_length
    }

    pub fn head_positions(&self) -> usize {
        if self.include_prompt_in_output {
            self.prompt_k + self.n_patches()
        } else {
            self.n_patches()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |key: &str, e: Error| Error::Config {
            key: key.to_string(),
            message: e.to_string(),
        };
        self.window.validate().map_err(|e| field("window", e))?;
        self.patch
            .validate(self.window.lookback)
            .map_err(|e| field("patch", e))?;
        self.decomposition
            .validate(self.window.lookback)
            .map_err(|e| field("decomposition", e))?;
        self.backbone.validate().map_err(|e| field("backbone", e))?;
        if self.n_anchors == 0 || self.n_anchors > self.vocab_size / 2 {
            return Err(Error::Config {
                key: "n_anchors".into(),
                message: format!(
                    "{} must be in [1, vocab_size/2 = {}]",
                    self.n_anchors,
                    self.vocab_size / 2
                ),
            });
        }
        if self.prompt_k > self.n_anchors {
            return Err(Error::Config {
                key: "prompt_k".into(),
                message: format!("{} exceeds n_anchors {}", self.prompt_k, self.n_anchors),
            });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config {
                key: "lambda".into(),
                message: format!("{} must be a finite value ≥ 0", self.lambda),
            });
        }
        let len = self.prompt_k + self.n_patches();
        if len > self.backbone.max_seq_len {
            return Err(Error::Config {
                key: "backbone.max_seq_len".into(),
                message: format!(
                    "{} is shorter than prompt_k + N_P = {len}",
                    self.backbone.max_seq_len
                ),
            });
        }
        if self.n_channels == 0 {
            return Err(Error::Config {
                key: "n_channels".into(),
                message: "must be at least 1".into(),
            });
        }
        if !(self.revin_eps > 0.0) {
            return Err(Error::Config {
                key: "revin_eps".into(),
                message: "must be positive".into(),
            });
        }
        Ok(())
    }
}

/// A window tokenized on its standardised form, ready for any number of
/// forward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWindow {
    pub channel: usize,
    /// `N_P × 3·L_P` meta-token of `z`.
    pub token: Tensor,
    pub mean: f64,
    pub variance: f64,
    pub target: Vec<f64>,
}

/// Every intermediate of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `B × N_P × D`.
    pub ts_embed: Var,
    /// `V′ × D`.
    pub anchors: Var,
    /// Backbone input, `B × (K + N_P) × D`.
    pub prompted: Var,
    /// Output projection, `B × 3τ′`, in (trend, seasonal, residual) blocks.
    pub components: Var,
    /// Sum of the three blocks, before denormalisation, `B × τ′`.
    pub core: Var,
    /// `B × τ′`.
    pub forecast: Var,
    pub selections: Vec<PromptSelection>,
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub loss: Var,
    pub mse: Var,
    /// Batch-mean of the summed selected scores.
    pub alignment: Var,
    pub pass: ForwardPass,
}

#[derive(Debug, Clone)]
pub struct ForecastModel {
    config: ModelConfig,
    embeddings: EmbeddingMatrix,
    input_projection: Linear,
    anchors: AnchorBank,
    backbone: Backbone,
    output_projection: Linear,
    revin_gamma: Tensor,
    revin_beta: Tensor,
}

impl ForecastModel {
    /// Fresh model with a generated clustered vocabulary.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
        let embeddings = EmbeddingMatrix::gaussian_mixture(
            config.vocab_size,
            config.backbone.embed_dim,
            config.vocab_clusters.max(1),
            0.1,
            &mut rng,
        )?;
        let backbone = Backbone::init(config.backbone, seed, None)?;
        Self::from_parts(config, embeddings, backbone, seed)
    }

    /// Fresh heads around a given vocabulary and backbone. The trainability
    /// policy from `config` is applied to the backbone.
    pub fn from_parts(
        mut config: ModelConfig,
        embeddings: EmbeddingMatrix,
        mut backbone: Backbone,
        seed: u64,
    ) -> Result<Self> {
        config.vocab_size = embeddings.vocab_size();
        config.validate()?;
        if embeddings.dim() != config.backbone.embed_dim {
            return Err(Error::Config {
                key: "backbone.embed_dim".into(),
                message: format!(
                    "{} differs from the embedding matrix width {}",
                    config.backbone.embed_dim,
                    embeddings.dim()
                ),
            });
        }
        if *backbone.config() != config.backbone {
            return Err(Error::validation("backbone does not match config.backbone"));
        }
        backbone.apply_policy(config.policy);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0002);
        let d = config.backbone.embed_dim;
        let mut input_projection = Linear::uniform(config.token_width(), d, &mut rng);
        let mut output_projection =
            Linear::uniform(config.head_positions() * d, 3 * config.window.horizon, &mut rng);
        input_projection.set_requires_grad(true);
        output_projection.set_requires_grad(true);
        let anchors = AnchorBank::one_hot(&embeddings, config.n_anchors, &mut rng)?;
        let c = config.n_channels;
        Ok(ForecastModel {
            input_projection,
            anchors,
            backbone,
            output_projection,
            revin_gamma: Tensor::ones(vec![c]).with_requires_grad(true),
            revin_beta: Tensor::zeros(vec![c]).with_requires_grad(true),
            config,
            embeddings,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn anchor_bank(&self) -> &AnchorBank {
        &self.anchors
    }

    /// Keep the cached anchors in step with `map_weights`.
    pub fn refresh_anchors(&mut self) -> Result<()> {
        self.anchors.derive(&self.embeddings)
    }

    /// Trainable tensors only, by name.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit_all(&mut |n, t| {
            if t.requires_grad() {
                out.push((n.to_string(), t));
            }
        });
        out
    }

    fn visit_all<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f("input_projection.weight", &self.input_projection.weight);
        f("input_projection.bias", &self.input_projection.bias);
        f("anchors.map_weights", &self.anchors.map_weights);
        for (name, t) in self.backbone.named_parameters() {
            f(&format!("backbone.{name}"), t);
        }
        f("output_projection.weight", &self.output_projection.weight);
        f("output_projection.bias", &self.output_projection.bias);
        f("revin.gamma", &self.revin_gamma);
        f("revin.beta", &self.revin_beta);
    }

    pub fn revin_params(&self, channel: usize) -> (f64, f64) {
        (self.revin_gamma.data()[channel], self.revin_beta.data()[channel])
    }

    /// Standardise and tokenize one input window.
    pub fn prepare(&self, channel: usize, input: &[f64], target: &[f64]) -> Result<PreparedWindow> {
        let cfg = &self.config;
        if input.len() != cfg.window.lookback {
            return Err(Error::shape(format!(
                "input length {} differs from lookback {}",
                input.len(),
                cfg.window.lookback
            )));
        }
        if channel >= cfg.n_channels {
            return Err(Error::validation(format!(
                "channel {channel} outside the {} configured channels",
                cfg.n_channels
            )));
        }
        let (z, state) = revin_normalize(input, 1.0, 0.0, cfg.revin_eps)?;
        let [t, s, r] = cfg.decomposition.components(&z)?;
        let token = build_meta_token(
            &patch(&t, &cfg.patch)?,
            &patch(&s, &cfg.patch)?,
            &patch(&r, &cfg.patch)?,
            state,
        )?;
        Ok(PreparedWindow {
            channel,
            token: token.values,
            mean: state.mean,
            variance: state.variance,
            target: target.to_vec(),
        })
    }

    pub fn prepare_window(&self, w: &Window) -> Result<PreparedWindow> {
        self.prepare(w.channel, &w.input, &w.target)
    }

    pub fn prepare_all(&self, windows: &[Window]) -> Result<Vec<PreparedWindow>> {
        windows.iter().map(|w| self.prepare_window(w)).collect()
    }

    fn revin_state(&self, w: &PreparedWindow) -> RevInState {
        let (gamma, beta) = self.revin_params(w.channel);
        RevInState {
            mean: w.mean,
            variance: w.variance,
            gamma,
            beta,
            epsilon: self.config.revin_eps,
        }
    }

    /// Patch embeddings `B × N_P × D` for a batch, on the tape.
    fn embed(&self, tape: &mut Tape, batch: &[&PreparedWindow]) -> Result<(Var, Var, Var)> {
        let cfg = &self.config;
        let (b, np, width) = (batch.len(), cfg.n_patches(), cfg.token_width());
        let mut tokens = Vec::with_capacity(b * np * width);
        for w in batch {
            if w.token.shape() != [np, width] {
                return Err(Error::shape(format!(
                    "prepared token {:?}, expected [{np}, {width}]",
                    w.token.shape()
                )));
            }
            tokens.extend_from_slice(w.token.data());
        }
        let tokens = tape.constant(vec![b, np, width], tokens)?;
        let mut mask = vec![0.0; b * np * width];
        let l = cfg.patch.patch_length;
        for row in mask.chunks_mut(width) {
            row[..l].iter_mut().for_each(|v| *v = 1.0);
        }
        let mask = tape.constant(vec![b, np, width], mask)?;

        let channels: Vec<usize> = batch.iter().map(|w| w.channel).collect();
        let gamma = tape.leaf(&self.revin_gamma);
        let beta = tape.leaf(&self.revin_beta);
        let gamma = tape.gather_rows(gamma, &channels)?;
        let beta = tape.gather_rows(beta, &channels)?;
        let scaled = tape.scale_rows(tokens, gamma)?;
        let shifted = tape.scale_rows(mask, beta)?;
        let meta = tape.add(scaled, shifted)?;
        let embed = self.input_projection.forward(tape, meta)?;
        Ok((embed, gamma, beta))
    }

    /// Patch embeddings and RevIN state of one raw window, computed directly.
    pub fn tokenize_and_embed(&self, channel: usize, x: &[f64]) -> Result<(Tensor, RevInState)> {
        let w = self.prepare(channel, x, &[])?;
        let mut tape = Tape::new();
        let (embed, _, _) = self.embed(&mut tape, &[&w])?;
        let np = self.config.n_patches();
        let d = self.config.backbone.embed_dim;
        let t = Tensor::matrix(np, d, tape.value(embed).to_vec())?;
        Ok((t, self.revin_state(&w)))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &[&PreparedWindow],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardPass> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let cfg = &self.config;
        let (b, np, d, k) = (
            batch.len(),
            cfg.n_patches(),
            cfg.backbone.embed_dim,
            cfg.prompt_k,
        );
        let horizon = cfg.window.horizon;
        let (ts_embed, gamma, beta) = self.embed(tape, batch)?;
        let anchors = prompt::derive_anchors_on(tape, &self.embeddings, &self.anchors.map_weights)?;

        let mut selections = Vec::with_capacity(b);
        let prompted = if k == 0 {
            for _ in 0..b {
                selections.push(PromptSelection {
                    indices: Vec::new(),
                    scores: Vec::new(),
                    degenerate: false,
                });
            }
            ts_embed
        } else {
            let anchor_values = tape.to_tensor(anchors);
            let embed_values = tape.value(ts_embed).to_vec();
            let mut rows = Vec::with_capacity(b * k);
            for i in 0..b {
                let one = Tensor::matrix(np, d, embed_values[i * np * d..(i + 1) * np * d].to_vec())?;
                let sel = prompt::retrieve_topk_with(&one, &anchor_values, k, cfg.pooling)?;
                rows.extend_from_slice(&sel.indices);
                selections.push(sel);
            }
            let prefix = tape.gather_rows(anchors, &rows)?;
            let prefix = tape.reshape(prefix, vec![b, k, d])?;
            tape.concat(&[prefix, ts_embed], 1)?
        };

        let hidden = self.backbone.forward(tape, prompted, dropout_rng)?;
        let kept = if cfg.include_prompt_in_output {
            hidden
        } else {
            tape.narrow(hidden, 1, k, np)?
        };
        let flat = tape.reshape(kept, vec![b, cfg.head_positions() * d])?;
        let components = self.output_projection.forward(tape, flat)?;
        let trend = tape.narrow(components, 1, 0, horizon)?;
        let seasonal = tape.narrow(components, 1, horizon, horizon)?;
        let residual = tape.narrow(components, 1, 2 * horizon, horizon)?;
        let core = tape.add(trend, seasonal)?;
        let core = tape.add(core, residual)?;

        // (y − β)/γ · √(σ² + ε) + μ, per window
        let ones = tape.constant(vec![b, horizon], vec![1.0; b * horizon])?;
        let beta_rows = tape.scale_rows(ones, beta)?;
        let centred = tape.sub(core, beta_rows)?;
        let unit = tape.constant(vec![b], vec![1.0; b])?;
        let inv_gamma = tape.div(unit, gamma)?;
        let unscaled = tape.scale_rows(centred, inv_gamma)?;
        let eps = cfg.revin_eps;
        let std: Vec<f64> = batch.iter().map(|w| (w.variance + eps).sqrt()).collect();
        let std = tape.constant(vec![b], std)?;
        let rescaled = tape.scale_rows(unscaled, std)?;
        let mut means = Vec::with_capacity(b * horizon);
        for w in batch {
            means.extend(std::iter::repeat_n(w.mean, horizon));
        }
        let means = tape.constant(vec![b, horizon], means)?;
        let forecast = tape.add(rescaled, means)?;

        Ok(ForwardPass {
            ts_embed,
            anchors,
            prompted,
            components,
            core,
            forecast,
            selections,
        })
    }

    /// `MSE(ŷ, y) − λ · mean_b Σ_k score(b, k)`.
    pub fn joint_loss(
        &self,
        tape: &mut Tape,
        batch: &[&PreparedWindow],
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<LossParts> {
        let pass = self.forward(tape, batch, dropout_rng)?;
        let horizon = self.config.window.horizon;
        let mut targets = Vec::with_capacity(batch.len() * horizon);
        for w in batch {
            if w.target.len() != horizon {
                return Err(Error::shape(format!(
                    "target length {} differs from horizon {horizon}",
                    w.target.len()
                )));
            }
            targets.extend_from_slice(&w.target);
        }
        let targets = tape.constant(vec![batch.len(), horizon], targets)?;
        let err = tape.sub(pass.forecast, targets)?;
        let sq = tape.square(err);
        let mse = tape.mean(sq);
        let alignment = prompt::alignment_on_tape(
            tape,
            pass.ts_embed,
            pass.anchors,
            &pass.selections,
            self.config.pooling,
        )?;
        let weighted = tape.scale(alignment, self.config.lambda);
        let loss = tape.sub(mse, weighted)?;
        Ok(LossParts {
            loss,
            mse,
            alignment,
            pass,
        })
    }

    /// Forecasts for a batch, `B` rows of `τ′`.
    pub fn forecast_batch(&self, batch: &[&PreparedWindow]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, batch, None)?;
        Ok(tape
            .value(pass.forecast)
            .chunks(self.config.window.horizon)
            .map(<[f64]>::to_vec)
            .collect())
    }

    pub fn forecast(&self, window: &PreparedWindow) -> Result<Vec<f64>> {
        Ok(self.forecast_batch(&[window])?.remove(0))
    }

    /// Forecast every window in chunks of `chunk`.
    pub fn forecast_all(&self, windows: &[PreparedWindow], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        for part in windows.chunks(chunk.max(1)) {
            let refs: Vec<&PreparedWindow> = part.iter().collect();
            out.extend(self.forecast_batch(&refs)?);
        }
        Ok(out)
    }
}

impl Parameterized for ForecastModel {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit_all(&mut |n, t| f(n, t));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.input_projection.visit_mut("input_projection", f);
        f("anchors.map_weights", &mut self.anchors.map_weights);
        self.backbone
            .visit_params_mut(&mut |n, t| f(&format!("backbone.{n}"), t));
        self.output_projection.visit_mut("output_projection", f);
        f("revin.gamma", &mut self.revin_gamma);
        f("revin.beta", &mut self.revin_beta);
    }
}

/// Sum the (trend, seasonal, residual) thirds of `y_out` and undo RevIN.
pub fn recombine_and_denormalize(y_out: &[f64], state: &RevInState) -> Result<Vec<f64>> {
    if y_out.len() % 3 != 0 {
        return Err(Error::shape(format!(
            "output length {} is not divisible by 3",
            y_out.len()
        )));
    }
    let h = y_out.len() / 3;
    let summed: Vec<f64> = (0..h)
        .map(|i| y_out[i] + y_out[h + i] + y_out[2 * h + i])
        .collect();
    revin_denormalize(&summed, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::tokenize;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn sine(len: usize, phase: f64) -> Vec<f64> {
        (0..len)
            .map(|t| 3.0 + (t as f64 * 0.7 + phase).sin() + 0.05 * t as f64)
            .collect()
    }

    fn tiny_batch(model: &ForecastModel, n: usize) -> Vec<PreparedWindow> {
        let cfg = model.config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|i| {
                let x = sine(cfg.window.lookback, i as f64);
                let y: Vec<f64> = (0..cfg.window.horizon).map(|_| rng.random::<f64>()).collect();
                model.prepare(0, &x, &y).unwrap()
            })
            .collect()
    }

    #[test]
    fn config_validation_names_fields() {
        let cfg = ModelConfig {
            prompt_k: 40,
            ..ModelConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "prompt_k"),
            other => panic!("{other:?}"),
        }
        let cfg = ModelConfig {
            lambda: -1.0,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "lambda"));
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let model = ForecastModel::new(ModelConfig::default(), 3).unwrap();
        let x = sine(96, 0.0);
        let (a, _) = model.tokenize_and_embed(0, &x).unwrap();
        let (b, _) = model.tokenize_and_embed(0, &x).unwrap();
        assert_eq!(a.shape(), [12, 64]);
        assert_eq!(a, b);
    }

    #[test]
    fn cached_path_matches_direct_tokenization() {
        let mut model = ForecastModel::new(ModelConfig::default(), 3).unwrap();
        model.revin_gamma.data_mut()[0] = 1.7;
        model.revin_beta.data_mut()[0] = -0.4;
        let x = sine(96, 0.3);
        let (embed, _) = model.tokenize_and_embed(0, &x).unwrap();
        let cfg = model.config();
        let token = tokenize(&x, 1.7, -0.4, cfg.revin_eps, &cfg.decomposition, &cfg.patch).unwrap();
        let mut tape = Tape::new();
        let t = tape.leaf(&token.values);
        let direct = model.input_projection.forward(&mut tape, t).unwrap();
        for (a, b) in embed.data().iter().zip(tape.value(direct)) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn forecast_length_and_recombination() {
        for k in [0, 2] {
            let cfg = ModelConfig {
                prompt_k: k,
                ..ModelConfig::tiny()
            };
            let model = ForecastModel::new(cfg, 1).unwrap();
            let batch = tiny_batch(&model, 3);
            let refs: Vec<&PreparedWindow> = batch.iter().collect();
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &refs, None).unwrap();
            assert_eq!(tape.shape(pass.forecast), [3, 8]);
            assert_eq!(tape.shape(pass.prompted), [3, k + 4, 16]);
            assert!(pass.selections.iter().all(|s| s.k() == k));
            let comps = tape.value(pass.components).to_vec();
            let core = tape.value(pass.core).to_vec();
            for b in 0..3 {
                for i in 0..8 {
                    let c = &comps[b * 24..(b + 1) * 24];
                    assert!((c[i] + c[8 + i] + c[16 + i] - core[b * 8 + i]).abs() <= 1e-12);
                }
                let state = model.revin_state(&batch[b]);
                let expect = recombine_and_denormalize(&comps[b * 24..(b + 1) * 24], &state).unwrap();
                for (e, f) in expect.iter().zip(&tape.value(pass.forecast)[b * 8..(b + 1) * 8]) {
                    assert!((e - f).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn recombine_examples() {
        let id = RevInState {
            mean: 0.0,
            variance: 1.0,
            gamma: 1.0,
            beta: 0.0,
            epsilon: 0.0,
        };
        assert_eq!(recombine_and_denormalize(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &id).unwrap(), [9.0, 12.0]);
        assert_eq!(recombine_and_denormalize(&[7.0, 0.0, 0.0], &id).unwrap(), [7.0]);
        assert!(recombine_and_denormalize(&[1.0, 2.0], &id).is_err());
    }

    #[test]
    fn loss_decomposes_into_parts() {
        let model = ForecastModel::new(ModelConfig::tiny(), 2).unwrap();
        let batch = tiny_batch(&model, 4);
        let refs: Vec<&PreparedWindow> = batch.iter().collect();
        let mut tape = Tape::new();
        let parts = model.joint_loss(&mut tape, &refs, None).unwrap();
        let f = tape.value(parts.pass.forecast);
        let mut mse = 0.0;
        for (b, w) in batch.iter().enumerate() {
            for i in 0..8 {
                mse += (f[b * 8 + i] - w.target[i]).powi(2);
            }
        }
        mse /= 32.0;
        let align: f64 = parts
            .pass
            .selections
            .iter()
            .map(|s| s.scores.iter().sum::<f64>())
            .sum::<f64>()
            / 4.0;
        let expect = mse - model.config().lambda * align;
        assert!((tape.scalar_value(parts.loss) - expect).abs() <= 1e-12);
        assert!((tape.scalar_value(parts.mse) - mse).abs() <= 1e-12);

        let cfg = ModelConfig {
            lambda: 0.0,
            ..ModelConfig::tiny()
        };
        let model = ForecastModel::new(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let parts = model.joint_loss(&mut tape, &refs, None).unwrap();
        assert_eq!(tape.scalar_value(parts.loss), tape.scalar_value(parts.mse));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut model = ForecastModel::new(ModelConfig::tiny(), 9).unwrap();
        let batch = tiny_batch(&model, 2);
        // at 1e-6 roundoff dominates for gradients near 1e-7
        let report = grad_check(&mut model, 1e-5, |m, tape| {
            let refs: Vec<&PreparedWindow> = batch.iter().collect();
            Ok(m.joint_loss(tape, &refs, None)?.loss)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn parameter_listing_follows_policy() {
        let model = ForecastModel::new(ModelConfig::tiny(), 0).unwrap();
        let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"backbone.pos_embedding".to_string()));
        assert!(names.contains(&"anchors.map_weights".to_string()));
        assert!(names.contains(&"revin.gamma".to_string()));
        assert!(names.iter().all(|n| !n.contains("attn") && !n.contains("ffn")));
    }

    #[test]
    fn selection_invariant_under_affine_input() {
        // ε breaks exact invariance (σ² scales, ε does not), so keep it negligible
        let cfg = ModelConfig {
            revin_eps: 1e-14,
            ..ModelConfig::tiny()
        };
        let model = ForecastModel::new(cfg, 4).unwrap();
        let x = sine(32, 0.2);
        let y: Vec<f64> = x.iter().map(|v| 5.0 * v - 3.0).collect();
        let a = model.prepare(0, &x, &[0.0; 8]).unwrap();
        let b = model.prepare(0, &y, &[0.0; 8]).unwrap();
        let mut tape = Tape::new();
        let pa = model.forward(&mut tape, &[&a], None).unwrap();
        let pb = model.forward(&mut tape, &[&b], None).unwrap();
        assert_eq!(pa.selections[0].indices, pb.selections[0].indices);
        for (u, v) in tape.value(pa.ts_embed).iter().zip(tape.value(pb.ts_embed)) {
            assert!((u - v).abs() <= 1e-9);
        }
    }
}
