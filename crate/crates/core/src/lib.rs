//! Train-once, deploy-many supernet for transducer sequence models.
//!
//! One weight-sharing transducer is trained with sandwich sampling and
//! in-place distillation; size-constrained subnetworks are then extracted by
//! evolutionary search over layer depth and FFN width.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod search;
pub mod supernet;
pub mod tensor;
pub mod trainer;
pub mod transducer;

pub use error::{Error, Result};
pub use tensor::Tensor;
