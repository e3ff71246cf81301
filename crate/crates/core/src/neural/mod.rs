//! Minimal dense compute: matrices, layers with hand-written backward
//! passes, masked multi-head attention, and finite-difference checking.

mod attention;
mod gradcheck;
mod layers;
mod mask;
mod params;
mod tensor;

pub use attention::{
    attention_backward, attention_forward, AttentionCache, AttentionGrads, MASK_BIAS,
};
pub use gradcheck::{
    analytic_param_gradient, compare, flatten_params, grad_check, grad_check_params,
    numeric_gradient, numeric_param_gradient, relative_error, GradCheckReport, DEFAULT_STEP,
};
pub use layers::{
    gelu, gelu_grad, LayerNorm, LayerNormCache, Linear, MaskedBlock, MaskedBlockCache, MhaCache,
    MultiHeadAttention, LAYER_NORM_EPS,
};
pub use mask::BoolGrid;
pub use params::{Init, Param, ParamStore};
pub use tensor::Tensor2D;

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("unknown parameter `{0}`")]
    MissingParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}
