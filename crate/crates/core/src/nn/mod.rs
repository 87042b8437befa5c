//! Transformer classifier, side branches and the merged model.

pub mod layers;
pub mod side;
pub mod transformer;

pub use layers::{Init, LayerNorm, Linear, MsaBlock};
pub use side::{
    count_side_params, CombinedModel, CombinedOutput, SideBranch, SideConfig, SideRole, SideTunedModel, TokenHead,
};
pub use transformer::{count_params, BatchInput, Classifier, MaskVector, ModelConfig, TokenSequence, Transformer};
