//! The transformer backbone under different trainability policies, and a
//! weight file round trip.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2ip::backbone::{Backbone, BackboneConfig, TrainabilityPolicy};
use s2ip::tensor::Tape;

pub fn run() -> s2ip::Result<()> {
    let config = BackboneConfig::default();
    let mut backbone = Backbone::init(config, 0, None)?;
    println!("{} parameters in {} layers", backbone.parameter_count(), config.n_layers);

    for (label, policy) in [
        ("frozen", TrainabilityPolicy::FROZEN),
        ("norms + positions", TrainabilityPolicy::FINE_TUNE_NORMS),
    ] {
        let trainable = backbone.trainable_parameters(policy);
        let count: usize = trainable.iter().map(|(_, t)| t.numel()).sum();
        println!("{label}: {} tensors, {count} values", trainable.len());
    }

    let dir = std::env::temp_dir().join("s2ip-backbone-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("backbone.weights");
    backbone.save_weights(&path)?;
    let reloaded = Backbone::init(config, 99, Some(&path))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = s2ip::backbone::random_input(2, 10, config.embed_dim, &mut rng);
    let outputs: Vec<Vec<f64>> = [&backbone, &reloaded]
        .iter()
        .map(|b| -> s2ip::Result<Vec<f64>> {
            let mut tape = Tape::new();
            let v = tape.leaf(&x);
            let out = b.forward(&mut tape, v, None)?;
            Ok(tape.value(out).to_vec())
        })
        .collect::<s2ip::Result<_>>()?;
    println!("reloaded weights reproduce the output: {}", outputs[0] == outputs[1]);

    let big = BackboneConfig::gpt2_small_six_layers();
    println!("six-layer preset: D={}, heads={}", big.embed_dim, big.n_heads);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
