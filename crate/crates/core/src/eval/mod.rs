//! Faithfulness, similarity, efficiency accounting and bound checks.

pub mod bounds;
pub mod cost;
pub mod metrics;
pub mod report;

pub use bounds::{check_error_bound, full_value, normalized_attribution, predicted_class, BoundReport};
pub use cost::{
    activation_count, block_flops, classifier_flops, combined_flops, preset, separate_flops, separate_params,
    side_flops, EfficiencyReport, FlopCount, PRESETS,
};
pub use metrics::{
    cka, curve_counts, gradient_conflict, insertion_deletion, ranking, trapezoid, CurveMode, InsertionDeletionCurve,
};
pub use report::{evaluate, layer_cka, EvalOptions, EvalReport, Faithfulness};
