//! Fixtures shared by the criterion benchmarks.

use anomret::synth::{gen_model_scores, gen_paired_embeddings, PairedEmbeddings, SynthConfig};
use anomret::ScoreMatrix;

fn config(n_items: usize, dim: usize, models: usize) -> SynthConfig {
    SynthConfig {
        n_items,
        dim,
        noise_sigma: 0.5,
        seed: 7,
        model_skill: vec![0.7; models],
    }
}

/// Paired text and image embeddings of `n` items in `dim` dimensions.
pub fn embeddings(n: usize, dim: usize) -> PairedEmbeddings {
    gen_paired_embeddings(&config(n, dim, 0)).expect("valid fixture config")
}

/// `models` independent `n x n` score matrices.
pub fn score_matrices(n: usize, models: usize) -> Vec<ScoreMatrix> {
    gen_model_scores(&config(n, 2, models)).expect("valid fixture config")
}
