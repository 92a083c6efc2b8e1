//! Train on the synthetic sine-plus-trend series, evaluate on the held-out
//! tail, and reload the checkpoint.

use s2ip::harness::{build_dataset, build_model, generate, train_and_evaluate, RunConfig};
use s2ip::metrics::evaluate_model;
use s2ip::model::{load_checkpoint, save_checkpoint};
use s2ip::series::WindowSpec;

pub fn config(epochs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.window = WindowSpec {
        lookback: 96,
        horizon: 24,
        stride: 4,
    };
    c.model.backbone.embed_dim = 32;
    c.data.eval_stride = 4;
    c.train.epochs = epochs;
    c
}

pub fn run_with(epochs: usize) -> s2ip::Result<()> {
    let cfg = config(epochs);
    let data = build_dataset(generate(&cfg.data.synthetic)?, &cfg)?;
    println!(
        "{} train / {} val / {} test windows",
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let untrained = build_model(&cfg, data.frame.n_channels())?;
    let before = evaluate_model(&untrained, &data.test, &cfg.metrics)?.report;

    let (model, report, evaluation) = train_and_evaluate(&cfg, &data, None)?;
    for e in &report.epochs {
        println!(
            "epoch {:>2}  loss {:+.5}  mse {:.5}  val {:.5}",
            e.epoch,
            e.train_loss,
            e.train_mse,
            e.val_mse.unwrap_or(f64::NAN)
        );
    }
    println!("best epoch {} after {:.1}s", report.best_epoch, report.wall_clock_seconds);
    println!("test mse {:.5} (untrained {:.5}), mae {:.5}", evaluation.report.mse, before.mse, evaluation.report.mae);

    let path = std::env::temp_dir().join("s2ip-example.s2ip");
    save_checkpoint(&model, &path)?;
    let reloaded = load_checkpoint(&path)?;
    let again = evaluate_model(&reloaded, &data.test, &cfg.metrics)?.report;
    println!("reloaded checkpoint reproduces metrics: {}", again == evaluation.report);
    Ok(())
}

pub fn run() -> s2ip::Result<()> {
    run_with(2)
}

#[allow(dead_code)]
fn main() {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    if let Err(e) = run_with(epochs) {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
