//! Short-horizon scoring: SMAPE, MASE and OWA against the Naive2 reference.

use s2ip::metrics::{is_seasonal, mase, naive2_forecast, owa, seasonal_indices, smape, Naive2Options};

pub fn run() -> s2ip::Result<()> {
    let s = 12;
    let series: Vec<f64> = (0..84)
        .map(|t| 100.0 + t as f64 + 15.0 * (t as f64 * std::f64::consts::TAU / 12.0).cos())
        .collect();
    let (history, actual) = series.split_at(72);

    println!("seasonal at lag {s}: {}", is_seasonal(history, s, &Naive2Options::default()));
    let idx = seasonal_indices(history, s);
    println!("indices {:?}", idx.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());

    let reference = naive2_forecast(history, s, actual.len())?;
    let ref_smape = smape(actual, &reference)?;
    let ref_mase = mase(actual, &reference, history, s)?.unwrap_or(f64::NAN);
    println!("naive2: smape {ref_smape:.3}, mase {ref_mase:.3}");

    // repeat the last observed season
    let snaive: Vec<f64> = (0..actual.len()).map(|h| history[history.len() - s + h % s]).collect();
    let m_smape = smape(actual, &snaive)?;
    let m_mase = mase(actual, &snaive, history, s)?.unwrap_or(f64::NAN);
    println!("seasonal naive: smape {m_smape:.3}, mase {m_mase:.3}");
    match owa(m_smape, m_mase, ref_smape, ref_mase) {
        Some(o) => println!("owa {o:.3}"),
        None => println!("owa undefined"),
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
