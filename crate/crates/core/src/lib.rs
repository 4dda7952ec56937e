//! Language-free temporal grounding in a joint vision-language feature space.
//!
//! Training uses videos only: pseudo intervals come from clustering segment
//! features ([`proposal`]), pseudo queries are frame embeddings picked by a
//! small selection transformer ([`pseudo_query`]). At inference the grounding
//! model ([`grounding`]) receives real text embeddings instead.

pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod grounding;
pub mod nn;
pub mod par;
pub mod proposal;
pub mod pseudo_query;
pub mod store;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use par::Parallelism;
pub use tensor::Tensor;
