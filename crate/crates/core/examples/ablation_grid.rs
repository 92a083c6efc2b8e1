//! Feature ablation: no prompt and no decomposition, prompt only, and both;
//! plus a small sweep over the alignment weight.

use s2ip::harness::{generate, run_ablation, RunConfig};
use s2ip::series::WindowSpec;

pub fn run_with(epochs: usize) -> s2ip::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.model.window = WindowSpec {
        lookback: 96,
        horizon: 24,
        stride: 8,
    };
    cfg.model.backbone.embed_dim = 32;
    cfg.data.eval_stride = 8;
    cfg.train.epochs = epochs;
    cfg.ablation.lambdas = vec![0.0, 0.1];
    let rows = run_ablation(&cfg, &generate(&cfg.data.synthetic)?)?;
    println!("{:<24} {:>7} {:>6} {:>9} {:>9}", "cell", "prompt", "decomp", "mse", "mae");
    for r in rows {
        println!(
            "{:<24} {:>7} {:>6} {:>9.5} {:>9.5}",
            r.cell, r.prompt, r.decomposition, r.report.mse, r.report.mae
        );
    }
    Ok(())
}

pub fn run() -> s2ip::Result<()> {
    run_with(1)
}

#[allow(dead_code)]
fn main() {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    if let Err(e) = run_with(epochs) {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
