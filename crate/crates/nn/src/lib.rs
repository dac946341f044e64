//! Small reverse-mode autodiff over 2-D tensors, plus the layers needed for a
//! streaming conformer keyword spotter.

pub mod checkpoint;
pub mod conformer;
pub mod error;
pub mod float;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod mask;
pub mod params;
pub mod tensor;

pub use conformer::{BlockCache, ChunkSpec, ConformerBlock, ConformerDims};
pub use error::{NnError, Result};
pub use float::Float;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Conv2dGeometry, Function, Graph, Var};
pub use layers::{
    attention, attention_with_weights, sinusoidal_positions, ConvSubsample, Embedding, FeedForward,
    LayerNorm, Linear, Lstm, LstmState, MultiHeadAttention, RelPosBias,
};
pub use mask::AttentionMask;
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tensor::Tensor;
