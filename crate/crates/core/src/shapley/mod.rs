//! Shapley values: exact oracle, kernel sampling, regression estimation.

pub mod estimate;
pub mod game;
pub mod kernel;

pub use estimate::{
    efficiency_normalize, exact_shapley, kernelshap, kernelshap_on, shapley_from_table, Attribution,
    MAX_EXACT_PLAYERS,
};
pub use game::{full_mask, FnGame, Game, Memo, SurrogateGame, TableGame};
pub use kernel::{
    binomial, enumerate_subsets, harmonic, kernel_probabilities, sample_equicardinal, sample_subsets,
    second_moment_matrix, shapley_kernel, SecondMomentMatrix, ShapleyKernelDist, MAX_MOMENT_PLAYERS,
};
