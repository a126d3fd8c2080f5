//! Fixtures shared by the benchmarks.

use trikb::features::{generate_synthetic, SynthSpec};
use trikb::trainer::init_params;
use trikb::{AnswerVocab, Dataset, ModelDims, ModelParams, Rng, Tensor};

/// Full-width parameters over a vocabulary of `tails` answers.
pub fn full_width_params(tails: usize, feature_dim: usize, seed: u64) -> ModelParams {
    let vocab = AnswerVocab::from((0..tails).map(|i| format!("a{i}")).collect::<Vec<_>>());
    init_params(&vocab, feature_dim, ModelDims::FULL, &mut Rng::new(seed)).expect("valid fixture")
}

/// Random query vectors of width `dim`.
pub fn queries(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect()
}

/// Random `[rows × dim]` table.
pub fn table(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..rows * dim).map(|_| rng.normal()).collect();
    Tensor::new(vec![rows, dim], data).expect("shape matches")
}

/// Small synthetic dataset at the reduced model width.
pub fn desk_data(classes: usize, per_class: usize) -> Dataset {
    generate_synthetic(&SynthSpec::desk(classes, per_class, 0)).expect("valid spec")
}
