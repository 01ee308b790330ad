//! Differentiable building blocks: a small tape-based autodiff engine plus
//! the layers the matching model is assembled from.

mod gradcheck;
mod graph;
pub mod io;
mod layers;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport, Probe};
pub use graph::{log_sum_exp, sigmoid, softmax_in_place, window_before, Graph, Var};
pub use layers::{
    AdditiveAttention, AggCnn, AggCnnConfig, Gru, LayerNorm, Linear, MultiHeadAttention, NgramConv,
};
pub use params::{Grad, Gradients, ParamId, Init, ParamStore, Parameter, INIT_RANGE};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    IdOutOfRange { id: usize, vocab: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),
    #[error("bad parameter container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
