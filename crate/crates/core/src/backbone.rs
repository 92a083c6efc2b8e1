//! Miniature GPT-style causal transformer used as the frozen backbone.
//!
//! Blocks are pre-norm: `h = x + attn(ln1(x))`, `out = h + ffn(ln2(h))`,
//! with a final layer norm. Token embeddings are bypassed; callers feed
//! already-embedded sequences of shape `B × L × D`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::tensor::{io, Parameterized, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_mult: usize,
    /// Dropout on attention and FFN outputs during training. 0 disables it.
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            ffn_mult: 4,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// GPT2-small geometry truncated to its first six layers.
    pub fn gpt2_small_six_layers() -> Self {
        BackboneConfig {
            embed_dim: 768,
            n_layers: 6,
            n_heads: 12,
            max_seq_len: 1024,
            ffn_mult: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.max_seq_len == 0 || self.ffn_mult == 0 {
            return Err(Error::validation("max_seq_len and ffn_mult must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::validation(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::validation("layer_norm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Which backbone parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainabilityPolicy {
    pub positional_embedding: bool,
    pub layer_norms: bool,
    pub attention: bool,
    pub ffn: bool,
}

impl TrainabilityPolicy {
    /// Tune positional embeddings and layer norms; freeze attention and FFN.
    pub const FINE_TUNE_NORMS: TrainabilityPolicy = TrainabilityPolicy {
        positional_embedding: true,
        layer_norms: true,
        attention: false,
        ffn: false,
    };

    pub const FROZEN: TrainabilityPolicy = TrainabilityPolicy {
        positional_embedding: false,
        layer_norms: false,
        attention: false,
        ffn: false,
    };
}

impl Default for TrainabilityPolicy {
    fn default() -> Self {
        Self::FINE_TUNE_NORMS
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    policy: TrainabilityPolicy,
    pos_embedding: Tensor,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

impl Backbone {
    /// Fixed-seed random initialisation, optionally overwritten from a weight
    /// file. The trainability policy starts as [`TrainabilityPolicy::FROZEN`].
    pub fn init(config: BackboneConfig, seed: u64, weights: Option<&Path>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hidden = config.ffn_mult * d;
        let eps = config.layer_norm_eps;
        let pos_embedding = Tensor::randn(vec![config.max_seq_len, d], INIT_STD, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d, eps),
                qkv: Linear::normal(d, 3 * d, INIT_STD, &mut rng),
                proj: Linear::normal(d, d, INIT_STD, &mut rng),
                ln2: LayerNorm::new(d, eps),
                fc1: Linear::normal(d, hidden, INIT_STD, &mut rng),
                fc2: Linear::normal(hidden, d, INIT_STD, &mut rng),
            })
            .collect();
        let mut backbone = Backbone {
            config,
            policy: TrainabilityPolicy::FROZEN,
            pos_embedding,
            blocks,
            ln_f: LayerNorm::new(d, eps),
        };
        if let Some(path) = weights {
            backbone.load_weights(path)?;
        }
        Ok(backbone)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn policy(&self) -> TrainabilityPolicy {
        self.policy
    }

    /// Set `requires_grad` on every parameter according to `policy`.
    pub fn apply_policy(&mut self, policy: TrainabilityPolicy) {
        self.policy = policy;
        self.pos_embedding
            .set_requires_grad(policy.positional_embedding);
        for b in &mut self.blocks {
            b.ln1.set_requires_grad(policy.layer_norms);
            b.ln2.set_requires_grad(policy.layer_norms);
            b.qkv.set_requires_grad(policy.attention);
            b.proj.set_requires_grad(policy.attention);
            b.fc1.set_requires_grad(policy.ffn);
            b.fc2.set_requires_grad(policy.ffn);
        }
        self.ln_f.set_requires_grad(policy.layer_norms);
    }

    /// Apply `policy` and return the tensors it makes trainable.
    pub fn trainable_parameters(&mut self, policy: TrainabilityPolicy) -> Vec<(String, &Tensor)> {
        self.apply_policy(policy);
        self.named_parameters()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("pos_embedding".to_string(), &self.pos_embedding)];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("layer.{i}");
            out.push((format!("{p}.ln1.gain"), &b.ln1.gain));
            out.push((format!("{p}.ln1.bias"), &b.ln1.bias));
            out.push((format!("{p}.attn.qkv.weight"), &b.qkv.weight));
            out.push((format!("{p}.attn.qkv.bias"), &b.qkv.bias));
            out.push((format!("{p}.attn.proj.weight"), &b.proj.weight));
            out.push((format!("{p}.attn.proj.bias"), &b.proj.bias));
            out.push((format!("{p}.ln2.gain"), &b.ln2.gain));
            out.push((format!("{p}.ln2.bias"), &b.ln2.bias));
            out.push((format!("{p}.ffn.fc1.weight"), &b.fc1.weight));
            out.push((format!("{p}.ffn.fc1.bias"), &b.fc1.bias));
            out.push((format!("{p}.ffn.fc2.weight"), &b.fc2.weight));
            out.push((format!("{p}.ffn.fc2.bias"), &b.fc2.bias));
        }
        out.push(("ln_f.gain".to_string(), &self.ln_f.gain));
        out.push(("ln_f.bias".to_string(), &self.ln_f.bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    /// `x: B × L × D → B × L × D`. Pass an RNG to enable dropout.
    pub fn forward(&self, tape: &mut Tape, x: Var, mut dropout_rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let d = self.config.embed_dim;
        if shape.len() != 3 || shape[2] != d {
            return Err(Error::shape(format!(
                "backbone expects B × L × {d}, got {:?}",
                shape
            )));
        }
        let (batch, len) = (shape[0], shape[1]);
        if len > self.config.max_seq_len {
            return Err(Error::validation(format!(
                "sequence length {len} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let heads = self.config.n_heads;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();

        let pos = tape.leaf(&self.pos_embedding);
        let pos = tape.narrow(pos, 0, 0, len)?;
        let mut h = tape.add(x, pos)?;

        for block in &self.blocks {
            // attention
            let a = block.ln1.forward(tape, h)?;
            let qkv = block.qkv.forward(tape, a)?;
            let q = tape.narrow(qkv, 2, 0, d)?;
            let k = tape.narrow(qkv, 2, d, d)?;
            let v = tape.narrow(qkv, 2, 2 * d, d)?;
            let q = tape.split_heads(q, heads)?;
            let k = tape.split_heads(k, heads)?;
            let v = tape.split_heads(v, heads)?;
            let kt = tape.transpose_last2(k)?;
            let scores = tape.batch_matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let scores = tape.causal_mask(scores)?;
            let attn = tape.softmax(scores, 2)?;
            let ctx = tape.batch_matmul(attn, v)?;
            let ctx = tape.merge_heads(ctx, heads)?;
            let out = block.proj.forward(tape, ctx)?;
            let out = self.dropout(tape, out, &mut dropout_rng, batch * len * d)?;
            h = tape.add(h, out)?;

            // feed-forward
            let f = block.ln2.forward(tape, h)?;
            let f = block.fc1.forward(tape, f)?;
            let f = tape.gelu(f);
            let f = block.fc2.forward(tape, f)?;
            let f = self.dropout(tape, f, &mut dropout_rng, batch * len * d)?;
            h = tape.add(h, f)?;
        }
        self.ln_f.forward(tape, h)
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        rng: &mut Option<&mut dyn RngCore>,
        n: usize,
    ) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                    .collect();
                let shape = tape.shape(x).to_vec();
                let m = tape.constant(shape, mask)?;
                tape.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let params = self.named_parameters();
        io::write_records(&mut f, params.iter().map(|(n, t)| (n.as_str(), *t)))?;
        f.flush()?;
        Ok(())
    }

    /// Overwrite parameters from a weight file. Every parameter must be
    /// present with a matching shape; unknown records are rejected.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let records: BTreeMap<String, Tensor> = io::read_records(&mut f)?.into_iter().collect();
        self.assign(records)
    }

    pub(crate) fn assign(&mut self, mut records: BTreeMap<String, Tensor>) -> Result<()> {
        let mut result = Ok(());
        self.visit_params_mut(&mut |name, t| {
            if result.is_err() {
                return;
            }
            match records.remove(name) {
                None => result = Err(Error::Load(format!("weight file is missing tensor `{name}`"))),
                Some(src) if src.shape() != t.shape() => {
                    result = Err(Error::Load(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => {
                    t.set_data(src.into_data()).expect("shape checked");
                }
            }
        });
        result?;
        if let Some(extra) = records.keys().next() {
            return Err(Error::Load(format!("unexpected tensor `{extra}` in weight file")));
        }
        Ok(())
    }
}

impl Parameterized for Backbone {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, t) in self.named_parameters() {
            f(&name, t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("pos_embedding", &mut self.pos_embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("layer.{i}");
            b.ln1.visit_mut(&format!("{p}.ln1"), f);
            b.qkv.visit_mut(&format!("{p}.attn.qkv"), f);
            b.proj.visit_mut(&format!("{p}.attn.proj"), f);
            b.ln2.visit_mut(&format!("{p}.ln2"), f);
            b.fc1.visit_mut(&format!("{p}.ffn.fc1"), f);
            b.fc2.visit_mut(&format!("{p}.ffn.fc2"), f);
        }
        self.ln_f.visit_mut("ln_f", f);
    }
}

/// Random backbone input of shape `B × L × D`.
pub fn random_input<R: Rng + ?Sized>(batch: usize, len: usize, dim: usize, rng: &mut R) -> Tensor {
    Tensor::randn(vec![batch, len, dim], 1.0, rng)
}
