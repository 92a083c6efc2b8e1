//! Dump anchors, patch embeddings and prompted sequences for offline
//! inspection, then read them back.

use s2ip::harness::{build_dataset, export_embeddings, generate, train_and_evaluate, RunConfig};
use s2ip::series::WindowSpec;
use s2ip::tensor::io::{load_tensor, save_tensor};

pub fn run() -> s2ip::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.model.window = WindowSpec {
        lookback: 96,
        horizon: 24,
        stride: 8,
    };
    cfg.model.backbone.embed_dim = 32;
    cfg.data.eval_stride = 24;
    cfg.train.epochs = 2;
    let data = build_dataset(generate(&cfg.data.synthetic)?, &cfg)?;
    let (model, _, _) = train_and_evaluate(&cfg, &data, None)?;

    let dir = std::env::temp_dir().join("s2ip-embeddings");
    std::fs::create_dir_all(&dir)?;
    let tensors = export_embeddings(&model, &data.test, 16)?;
    for (t, name) in tensors.iter().zip(["anchors", "ts_embeds", "prompted_embeds"]) {
        let path = dir.join(format!("{name}.tensor"));
        save_tensor(&path, t)?;
        let back = load_tensor(&path)?;
        println!("{name:<16} {:?} -> {}", back.shape(), path.display());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
