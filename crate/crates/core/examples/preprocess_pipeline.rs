//! One window through instance normalisation, decomposition, patching and
//! meta-token assembly.

use s2ip::preprocess::{
    decompose, patch, revin_denormalize, revin_normalize, tokenize, DecompositionConfig, DecompositionMethod,
    PatchSpec, DEFAULT_EPSILON,
};

pub fn run() -> s2ip::Result<()> {
    let x: Vec<f64> = (0..96)
        .map(|t| 50.0 + 0.2 * t as f64 + 4.0 * (t as f64 * std::f64::consts::TAU / 24.0).sin())
        .collect();

    let (z, state) = revin_normalize(&x, 1.0, 0.0, DEFAULT_EPSILON)?;
    println!("mean {:.3}  variance {:.3}", state.mean, state.variance);
    let back = revin_denormalize(&z, &state)?;
    let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("round-trip error {err:.2e}");

    for method in [DecompositionMethod::Classical, DecompositionMethod::Stl] {
        let d = decompose(&z, 24, 25, method)?;
        let resid = d.residual.iter().map(|r| r * r).sum::<f64>() / z.len() as f64;
        println!("{method:?}: residual power {resid:.4}");
    }

    let spec = PatchSpec::default();
    let p = patch(&z, &spec)?;
    println!("{} patches of length {} (stride {})", p.rows(), p.cols(), spec.stride);

    let token = tokenize(&x, 1.0, 0.0, DEFAULT_EPSILON, &DecompositionConfig::default(), &spec)?;
    println!("meta-token {} x {}", token.n_patches, token.values.cols());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
