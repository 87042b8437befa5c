//! Side-tuned Shapley explainers for small masked transformers.
//!
//! A frozen classifier backbone feeds two narrow side branches: a surrogate that
//! predicts from masked inputs and an explainer that emits per-feature, per-class
//! attributions in the same forward pass. Exact enumeration, KernelSHAP and a
//! brute-force second-moment check live in [`shapley`] and serve as oracles.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod report;
pub mod run;
pub mod scalar;
pub mod shapley;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Classifier32 = nn::Classifier<f32>;
pub type Classifier64 = nn::Classifier<f64>;
pub type SideTunedModel32 = nn::SideTunedModel<f32>;
pub type SideTunedModel64 = nn::SideTunedModel<f64>;
pub type CombinedModel32 = nn::CombinedModel<f32>;
pub type CombinedModel64 = nn::CombinedModel<f64>;
pub type HeadExplainer32 = train::HeadExplainer<f32>;
pub type HeadExplainer64 = train::HeadExplainer<f64>;
