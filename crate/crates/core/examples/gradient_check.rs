//! Backward-pass gradients of the joint loss against central differences on
//! every trainable coordinate of a tiny model.

use s2ip::model::{ForecastModel, ModelConfig, PreparedWindow};
use s2ip::tensor::{grad_check, Parameterized};

pub fn run() -> s2ip::Result<()> {
    let mut model = ForecastModel::new(ModelConfig::tiny(), 1)?;
    println!("trainable tensors:");
    for name in model.trainable_names() {
        println!("  {name}");
    }
    let batch: Vec<PreparedWindow> = (0..2)
        .map(|i| {
            let x: Vec<f64> = (0..32).map(|t| ((t + 5 * i) as f64 * 0.4).sin()).collect();
            let y: Vec<f64> = (0..8).map(|t| ((t + 32 + 5 * i) as f64 * 0.4).sin()).collect();
            model.prepare(0, &x, &y)
        })
        .collect::<s2ip::Result<_>>()?;

    let report = grad_check(&mut model, 1e-5, |m, tape| {
        let refs: Vec<&PreparedWindow> = batch.iter().collect();
        Ok(m.joint_loss(tape, &refs, None)?.loss)
    })?;
    println!(
        "{} coordinates, max relative error {:.2e} at {}[{}]",
        report.checked, report.max_rel_error, report.worst_param, report.worst_index
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
