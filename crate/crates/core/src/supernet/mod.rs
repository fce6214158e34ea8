//! The weight-sharing supernet: search space, masked forward, adaptive
//! dropout, size model and checkpoints.

pub mod checkpoint;
pub mod inference;
pub mod model;
pub mod space;

pub use checkpoint::Checkpoint;
pub use inference::{Decoder, FrozenEvaluator, Runner, PREFIX_CACHE_ENTRIES};
pub use model::{adaptive_dropout_rate, model_size_bytes, Architecture, Dropout, Grad, SupernetParams};
pub use space::{SearchSpace, SubnetworkConfig};
