//! Training on the first 5% and 10% of the training split.

use s2ip::harness::{build_dataset, generate, train_and_evaluate, RunConfig, SyntheticConfig};
use s2ip::series::{SplitSpec, WindowSpec};

pub fn run_with(epochs: usize) -> s2ip::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic = SyntheticConfig {
        length: 14241,
        ..SyntheticConfig::default()
    };
    cfg.model.window = WindowSpec {
        lookback: 96,
        horizon: 24,
        stride: 4,
    };
    cfg.model.backbone.embed_dim = 32;
    cfg.data.eval_stride = 24;
    cfg.train.epochs = epochs;
    let frame = generate(&cfg.data.synthetic)?;
    for fraction in [None, Some(0.10), Some(0.05)] {
        cfg.split = SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            few_shot: fraction,
        };
        let data = build_dataset(frame.clone(), &cfg)?;
        let (_, report, eval) = train_and_evaluate(&cfg, &data, None)?;
        println!(
            "{:>5}: {:>5} train rows, {:>4} windows, {} epochs, test mse {:.5}",
            fraction.map_or("full".to_string(), |f| format!("{:.0}%", f * 100.0)),
            data.train_rows,
            data.train.len(),
            report.epochs.len(),
            eval.report.mse
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
