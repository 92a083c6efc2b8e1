//! Semantic anchors from a word-embedding table, top-K retrieval for a patch
//! embedding and the prefixed sequence fed to the backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2ip::prompt::{alignment_term, prefix_concat, retrieve_topk, retrieve_topk_with, AnchorBank, EmbeddingMatrix, Pooling};
use s2ip::tensor::Tensor;

pub fn run() -> s2ip::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vocab = EmbeddingMatrix::gaussian_mixture(500, 32, 8, 0.2, &mut rng)?;
    let bank = AnchorBank::one_hot(&vocab, 16, &mut rng)?;
    println!("{} anchors of width {}", bank.n_anchors(), vocab.dim());

    // patch embeddings lying near anchor 3
    let noise = Tensor::randn(vec![12, 32], 0.3, &mut rng);
    let data: Vec<f64> = (0..12)
        .flat_map(|r| {
            let n = noise.row(r).to_vec();
            bank.anchors().row(3).iter().zip(n).map(|(a, b)| a + b).collect::<Vec<_>>()
        })
        .collect();
    let ts = Tensor::matrix(12, 32, data)?;

    let sel = retrieve_topk(&ts, &bank, 4)?;
    println!("top-4 (mean pooling): {:?}", sel.indices);
    println!("scores: {:?}", sel.scores.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>());
    let per_patch = retrieve_topk_with(&ts, bank.anchors(), 4, Pooling::PerPatch)?;
    println!("top-4 (per-patch):    {:?}", per_patch.indices);
    println!("alignment {:.3}", alignment_term(&ts, &sel, &bank));

    let rows: Vec<Vec<f64>> = sel.indices.iter().map(|&i| bank.anchors().row(i).to_vec()).collect();
    let prompted = prefix_concat(&Tensor::from_rows(&rows)?, &ts)?;
    println!("prompted sequence {:?}", prompted.shape());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
