//! Checkpoint file: magic, TOML `ModelConfig` header, then every tensor.
//!
//! ```text
//! b"S2IP1\n" | u64 header_len | header (UTF-8 TOML) | record file
//! ```
//! The record file holds the vocabulary as `prompt.embeddings` followed by
//! every parameter, trainable or frozen.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::prompt::EmbeddingMatrix;
use crate::tensor::{io, Parameterized, Tensor};

use super::{ForecastModel, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"S2IP1\n";
const EMBEDDINGS: &str = "prompt.embeddings";

pub fn save_checkpoint(model: &ForecastModel, path: &Path) -> Result<()> {
    let header = toml::to_string(model.config())
        .map_err(|e| Error::validation(format!("cannot serialise model config: {e}")))?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    io::write_u64(&mut w, header.len() as u64)?;
    w.write_all(header.as_bytes())?;
    let mut records: Vec<(String, &Tensor)> = vec![(EMBEDDINGS.to_string(), model.embeddings().values())];
    model.visit_all(&mut |n, t| records.push((n.to_string(), t)));
    io::write_records(&mut w, records.iter().map(|(n, t)| (n.as_str(), *t)))?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ForecastModel> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Load("unexpected end of file".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Load(format!(
            "unsupported checkpoint version {:?}, expected {:?}",
            String::from_utf8_lossy(&magic).trim_end(),
            "S2IP1"
        )));
    }
    let len = io::read_u64(&mut r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Load(format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Load("unexpected end of file".into()))?;
    let header = String::from_utf8(header).map_err(|_| Error::Load("header is not UTF-8".into()))?;
    let config: ModelConfig =
        toml::from_str(&header).map_err(|e| Error::Load(format!("bad config header: {e}")))?;
    config.validate()?;

    let mut records: BTreeMap<String, Tensor> = io::read_records(&mut r)?.into_iter().collect();
    let embeddings = records
        .remove(EMBEDDINGS)
        .ok_or_else(|| Error::Load(format!("checkpoint has no `{EMBEDDINGS}`")))?;
    let expected = [config.vocab_size, config.backbone.embed_dim];
    if embeddings.shape() != expected {
        return Err(mismatch(EMBEDDINGS, &expected, embeddings.shape()));
    }
    let embeddings = EmbeddingMatrix::new(embeddings)?;
    let backbone = Backbone::init(config.backbone, 0, None)?;
    let mut model = ForecastModel::from_parts(config, embeddings, backbone, 0)?;

    let mut result = Ok(());
    model.visit_params_mut(&mut |name, t| {
        if result.is_err() {
            return;
        }
        match records.remove(name) {
            None => {
                result = Err(Error::Load(format!(
                    "checkpoint is missing `{name}`; check config field `{}`",
                    config_field(name, 0)
                )))
            }
            Some(src) if src.shape() != t.shape() => result = Err(mismatch(name, t.shape(), src.shape())),
            Some(src) => {
                t.set_data(src.into_data()).expect("shape checked");
            }
        }
    });
    result?;
    if let Some(extra) = records.keys().next() {
        return Err(Error::Load(format!(
            "unexpected tensor `{extra}`; check config field `{}`",
            config_field(extra, 0)
        )));
    }
    model.refresh_anchors()?;
    Ok(model)
}

fn mismatch(name: &str, expected: &[usize], found: &[usize]) -> Error {
    let axis = if expected.len() == found.len() {
        expected.iter().zip(found).position(|(a, b)| a != b).unwrap_or(0)
    } else {
        0
    };
    Error::Load(format!(
        "tensor `{name}` has shape {found:?} but the config header implies {expected:?}; \
         check config field `{}`",
        config_field(name, axis)
    ))
}

/// The config field that determines `axis` of tensor `name`.
fn config_field(name: &str, axis: usize) -> &'static str {
    let last = name.rsplit('.').next().unwrap_or(name);
    match name {
        EMBEDDINGS => ["vocab_size", "backbone.embed_dim"][axis.min(1)],
        "anchors.map_weights" => ["n_anchors", "vocab_size"][axis.min(1)],
        "revin.gamma" | "revin.beta" => "n_channels",
        "input_projection.weight" => ["patch.patch_length", "backbone.embed_dim"][axis.min(1)],
        "input_projection.bias" => "backbone.embed_dim",
        "output_projection.weight" => ["window.lookback", "window.horizon"][axis.min(1)],
        "output_projection.bias" => "window.horizon",
        "backbone.pos_embedding" => ["backbone.max_seq_len", "backbone.embed_dim"][axis.min(1)],
        _ if name.starts_with("backbone.layer.") && axis == 0 && last == "gain" => "backbone.embed_dim",
        _ if name.contains(".ffn.") => "backbone.ffn_mult",
        _ if name.starts_with("backbone.layer.") => "backbone.n_layers",
        _ => "backbone.embed_dim",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PreparedWindow;

    fn forecast(model: &ForecastModel) -> Vec<f64> {
        let x: Vec<f64> = (0..32).map(|t| (t as f64 * 0.4).sin() + 0.1 * t as f64).collect();
        let w: PreparedWindow = model.prepare(0, &x, &[0.0; 8]).unwrap();
        model.forecast(&w).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.s2ip");
        let mut model = ForecastModel::new(ModelConfig::tiny(), 12).unwrap();
        model.revin_gamma.data_mut()[0] = 1.25;
        model.anchors.map_weights.data_mut()[3] = 0.5;
        model.refresh_anchors().unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config(), model.config());
        let mut a = Vec::new();
        model.visit_params(&mut |n, t| a.push((n.to_string(), t.data().to_vec(), t.requires_grad())));
        let mut b = Vec::new();
        loaded.visit_params(&mut |n, t| b.push((n.to_string(), t.data().to_vec(), t.requires_grad())));
        assert_eq!(a, b);
        let (fa, fb) = (forecast(&model), forecast(&loaded));
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.s2ip");
        let model = ForecastModel::new(ModelConfig::tiny(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Load(_))));
        let mut other = bytes.clone();
        other[4] = b'2';
        std::fs::write(&path, &other).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn header_mismatch_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.s2ip");
        let model = ForecastModel::new(ModelConfig::tiny(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[14..14 + len].to_vec()).unwrap();

        for (from, to, field) in [
            ("horizon = 8", "horizon = 9", "window.horizon"),
            ("n_channels = 1", "n_channels = 2", "n_channels"),
            ("n_anchors = 8", "n_anchors = 7", "n_anchors"),
        ] {
            assert!(header.contains(from), "{header}");
            let edited = header.replacen(from, to, 1);
            let mut out = CHECKPOINT_MAGIC.to_vec();
            out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
            out.extend_from_slice(edited.as_bytes());
            out.extend_from_slice(&bytes[14 + len..]);
            std::fs::write(&path, &out).unwrap();
            let err = load_checkpoint(&path).unwrap_err().to_string();
            assert!(err.contains(field), "{field}: {err}");
        }
    }
}
