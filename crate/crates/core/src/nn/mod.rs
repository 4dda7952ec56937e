//! Differentiable building blocks and their gradient verification.

pub mod functions;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;

pub use functions::{gumbel_noise, gumbel_softmax, positional_encoding, smooth_l1, softmax};
pub use gradcheck::{check_gradients, relative_error, GradientReport};
pub use graph::{Bound, Grads, Graph, NodeId};
pub use layers::{Activation, BiGru, EncoderLayer, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use params::{Adam, ParamId, ParamStore};
