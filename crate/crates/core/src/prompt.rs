//! Semantic anchors, cosine score matching and top-K prefix prompts.
//!
//! Anchors are `E′ = M · E`, a trainable linear compression of a fixed
//! word-embedding matrix `E (V × D)` into `V′` rows. Each window's patch
//! embeddings are pooled and scored against every anchor; the best `K` are
//! prepended to the sequence fed to the backbone.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{io, Tape, Tensor, Var, COSINE_NORM_FLOOR};

/// Word-embedding matrix `V × D`. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: Tensor,
}

impl EmbeddingMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.rows() == 0 || values.cols() == 0 {
            return Err(Error::shape(format!(
                "embedding matrix must be non-empty V × D, got {:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding matrix has non-finite entries"));
        }
        Ok(EmbeddingMatrix {
            values: values.with_requires_grad(false),
        })
    }

    /// Clustered synthetic vocabulary: `clusters` Gaussian centres with
    /// unit-variance coordinates, members drawn around them with `spread`.
    pub fn gaussian_mixture<R: Rng + ?Sized>(
        vocab_size: usize,
        dim: usize,
        clusters: usize,
        spread: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if clusters == 0 {
            return Err(Error::validation("gaussian mixture needs at least one cluster"));
        }
        let centres = Tensor::randn(vec![clusters, dim], 1.0, rng);
        let noise = Tensor::randn(vec![vocab_size, dim], spread, rng);
        let mut data = Vec::with_capacity(vocab_size * dim);
        for v in 0..vocab_size {
            let c = rng.random_range(0..clusters);
            data.extend(centres.row(c).iter().zip(noise.row(v)).map(|(a, b)| a + b));
        }
        Self::new(Tensor::matrix(vocab_size, dim, data)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn vocab_size(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Write as a record file holding the single record `E`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        io::write_records(&mut f, [("E", &self.values)].into_iter())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let records = io::read_records(&mut f)?;
        let tensor = records
            .into_iter()
            .find(|(name, _)| name == "E")
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Load(format!("{} has no record `E`", path.display())))?;
        Self::new(tensor)
    }
}

/// Trainable map `M (V′ × V)` and the anchors it derives.
#[derive(Debug, Clone)]
pub struct AnchorBank {
    pub map_weights: Tensor,
    anchors: Tensor,
}

impl AnchorBank {
    /// Start from one-hot rows on `n_anchors` distinct random vocabulary
    /// items, so initial anchors are actual word embeddings.
    pub fn one_hot<R: Rng + ?Sized>(
        embeddings: &EmbeddingMatrix,
        n_anchors: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let v = embeddings.vocab_size();
        check_anchor_count(n_anchors, v)?;
        let mut map = vec![0.0; n_anchors * v];
        for (row, item) in sample(rng, v, n_anchors).into_iter().enumerate() {
            map[row * v + item] = 1.0;
        }
        Self::from_map(embeddings, Tensor::matrix(n_anchors, v, map)?.with_requires_grad(true))
    }

    pub fn from_map(embeddings: &EmbeddingMatrix, map_weights: Tensor) -> Result<Self> {
        if map_weights.rank() == 2 {
            check_anchor_count(map_weights.rows(), embeddings.vocab_size())?;
        }
        let anchors = derive_anchors(embeddings, &map_weights)?;
        Ok(AnchorBank {
            map_weights,
            anchors,
        })
    }

    /// Recompute anchors after `map_weights` changed.
    pub fn derive(&mut self, embeddings: &EmbeddingMatrix) -> Result<()> {
        self.anchors = derive_anchors(embeddings, &self.map_weights)?;
        Ok(())
    }

    pub fn anchors(&self) -> &Tensor {
        &self.anchors
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.rows()
    }
}

fn check_anchor_count(n_anchors: usize, vocab: usize) -> Result<()> {
    if n_anchors == 0 || n_anchors > vocab / 2 {
        return Err(Error::validation(format!(
            "n_anchors {n_anchors} must be in [1, V/2] for V = {vocab}"
        )));
    }
    Ok(())
}

/// `map_weights · E`.
pub fn derive_anchors(embeddings: &EmbeddingMatrix, map_weights: &Tensor) -> Result<Tensor> {
    let e = embeddings.values();
    if map_weights.rank() != 2 || map_weights.cols() != e.rows() {
        return Err(Error::shape(format!(
            "map_weights {:?} cannot multiply E {:?}",
            map_weights.shape(),
            e.shape()
        )));
    }
    let (rows, inner, cols) = (map_weights.rows(), e.rows(), e.cols());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let m = map_weights.row(r);
        for (i, &w) in m.iter().enumerate().take(inner) {
            if w != 0.0 {
                for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(e.row(i)) {
                    *o += w * x;
                }
            }
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// Tape version of [`derive_anchors`]; gradients reach `map_weights`.
pub fn derive_anchors_on(tape: &mut Tape, embeddings: &EmbeddingMatrix, map_weights: &Tensor) -> Result<Var> {
    let e = tape.leaf(embeddings.values());
    let m = tape.leaf(map_weights);
    tape.matmul(m, e)
}

/// How patch embeddings are reduced before scoring against an anchor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Cosine between the mean patch embedding and the anchor.
    #[default]
    Mean,
    /// Mean of per-patch cosines.
    PerPatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub value: f64,
    /// Set when a norm fell below the floor and the score was forced to 0.
    pub degenerate: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Score {
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return Score {
            value: 0.0,
            degenerate: true,
        };
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Score {
        value: dot / (na * nb),
        degenerate: false,
    }
}

pub fn mean_rows(m: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        out.iter_mut().zip(m.row(r)).for_each(|(o, x)| *o += x);
    }
    let n = m.rows().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Cosine between the mean of `ts_embed`'s rows and `anchor`.
pub fn pool_and_score(ts_embed: &Tensor, anchor: &[f64]) -> Score {
    cosine(&mean_rows(ts_embed), anchor)
}

/// Score `ts_embed (N_P × D)` against every row of `anchors`.
pub fn score_all(ts_embed: &Tensor, anchors: &Tensor, pooling: Pooling) -> Vec<Score> {
    match pooling {
        Pooling::Mean => {
            let pooled = mean_rows(ts_embed);
            (0..anchors.rows())
                .map(|a| cosine(&pooled, anchors.row(a)))
                .collect()
        }
        Pooling::PerPatch => (0..anchors.rows())
            .map(|a| {
                let mut total = 0.0;
                let mut degenerate = false;
                for p in 0..ts_embed.rows() {
                    let s = cosine(ts_embed.row(p), anchors.row(a));
                    total += s.value;
                    degenerate |= s.degenerate;
                }
                Score {
                    value: total / ts_embed.rows().max(1) as f64,
                    degenerate,
                }
            })
            .collect(),
    }
}

/// The `K` retrieved anchors, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub degenerate: bool,
}

impl PromptSelection {
    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Indices of the `k` largest scores, descending, ties to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn select(scores: &[Score], k: usize) -> Result<PromptSelection> {
    if k == 0 || k > scores.len() {
        return Err(Error::validation(format!(
            "k = {k} outside [1, {}]",
            scores.len()
        )));
    }
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    let indices = top_k_indices(&values, k);
    Ok(PromptSelection {
        scores: indices.iter().map(|&i| values[i]).collect(),
        degenerate: scores.iter().any(|s| s.degenerate),
        indices,
    })
}

pub fn retrieve_topk(ts_embed: &Tensor, bank: &AnchorBank, k: usize) -> Result<PromptSelection> {
    retrieve_topk_with(ts_embed, bank.anchors(), k, Pooling::Mean)
}

pub fn retrieve_topk_with(
    ts_embed: &Tensor,
    anchors: &Tensor,
    k: usize,
    pooling: Pooling,
) -> Result<PromptSelection> {
    if ts_embed.rank() != 2 || ts_embed.cols() != anchors.cols() {
        return Err(Error::shape(format!(
            "ts_embed {:?} vs anchors {:?}",
            ts_embed.shape(),
            anchors.shape()
        )));
    }
    select(&score_all(ts_embed, anchors, pooling), k)
}

/// Stack the selected anchors above the patch embeddings.
pub fn prefix_concat(selected: &Tensor, ts_embed: &Tensor) -> Result<Tensor> {
    let d = ts_embed.cols();
    if selected.rank() != 2 || ts_embed.rank() != 2 || (selected.rows() > 0 && selected.cols() != d) {
        return Err(Error::shape(format!(
            "prefix {:?} vs patches {:?}",
            selected.shape(),
            ts_embed.shape()
        )));
    }
    let mut data = Vec::with_capacity((selected.rows() + ts_embed.rows()) * d);
    data.extend_from_slice(selected.data());
    data.extend_from_slice(ts_embed.data());
    Tensor::matrix(selected.rows() + ts_embed.rows(), d, data)
}

/// Sum of the selected anchors' scores, for a single window.
pub fn alignment_term(ts_embed: &Tensor, selection: &PromptSelection, bank: &AnchorBank) -> f64 {
    let pooled = mean_rows(ts_embed);
    selection
        .indices
        .iter()
        .map(|&i| cosine(&pooled, bank.anchors().row(i)).value)
        .sum()
}

/// Differentiable alignment over a batch: `ts_embed` is `B × N_P × D`,
/// `anchors` is `V′ × D`, one selection per window. Returns the sum of the
/// selected scores divided by `B`.
pub fn alignment_on_tape(
    tape: &mut Tape,
    ts_embed: Var,
    anchors: Var,
    selections: &[PromptSelection],
    pooling: Pooling,
) -> Result<Var> {
    let shape = tape.shape(ts_embed).to_vec();
    if shape.len() != 3 || shape[0] != selections.len() {
        return Err(Error::shape(format!(
            "alignment over {:?} with {} selections",
            shape,
            selections.len()
        )));
    }
    let (batch, n_patches, dim) = (shape[0], shape[1], shape[2]);
    let total_k: usize = selections.iter().map(|s| s.k()).sum();
    if total_k == 0 {
        return Ok(tape.scalar(0.0));
    }
    let (queries, query_rows, anchor_rows) = match pooling {
        Pooling::Mean => {
            let pooled = tape.mean_axis(ts_embed, 1)?;
            let mut q = Vec::with_capacity(total_k);
            let mut a = Vec::with_capacity(total_k);
            for (b, s) in selections.iter().enumerate() {
                for &i in &s.indices {
                    q.push(b);
                    a.push(i);
                }
            }
            (pooled, q, a)
        }
        Pooling::PerPatch => {
            let flat = tape.reshape(ts_embed, vec![batch * n_patches, dim])?;
            let mut q = Vec::with_capacity(total_k * n_patches);
            let mut a = Vec::with_capacity(total_k * n_patches);
            for (b, s) in selections.iter().enumerate() {
                for &i in &s.indices {
                    for p in 0..n_patches {
                        q.push(b * n_patches + p);
                        a.push(i);
                    }
                }
            }
            (flat, q, a)
        }
    };
    let lhs = tape.gather_rows(queries, &query_rows)?;
    let rhs = tape.gather_rows(anchors, &anchor_rows)?;
    let cos = tape.cosine_rows(lhs, rhs)?;
    let total = tape.sum(cos);
    let per_patch = match pooling {
        Pooling::Mean => 1.0,
        Pooling::PerPatch => n_patches as f64,
    };
    Ok(tape.scale(total, 1.0 / (batch as f64 * per_patch)))
}
