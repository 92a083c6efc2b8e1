//! Every example runs to completion at its smallest setting.

#[allow(dead_code)]
#[path = "../examples/preprocess_pipeline.rs"]
mod preprocess_pipeline;

#[test]
fn preprocess_pipeline_runs() {
    preprocess_pipeline::run().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/anchor_retrieval.rs"]
mod anchor_retrieval;

#[test]
fn anchor_retrieval_runs() {
    anchor_retrieval::run().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/gradient_check.rs"]
mod gradient_check;

#[test]
fn gradient_check_runs() {
    gradient_check::run().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/frozen_backbone.rs"]
mod frozen_backbone;

#[test]
fn frozen_backbone_runs() {
    frozen_backbone::run().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/m4_metrics.rs"]
mod m4_metrics;

#[test]
fn m4_metrics_runs() {
    m4_metrics::run().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/train_synthetic.rs"]
mod train_synthetic;

#[test]
fn train_synthetic_runs() {
    train_synthetic::run().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/ablation_grid.rs"]
mod ablation_grid;

#[test]
fn ablation_grid_runs() {
    ablation_grid::run().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/few_shot.rs"]
mod few_shot;

#[test]
fn few_shot_runs() {
    few_shot::run().unwrap();
}

#[allow(dead_code)]
#[path = "../examples/export_embeddings.rs"]
mod export_embeddings;

#[test]
fn export_embeddings_runs() {
    export_embeddings::run().unwrap();
}
