//! Reverse-mode differentiation, parameters and optimisation.

mod gradcheck;
mod kernels;
pub mod nn;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_many, relative_error};
pub use optim::{AdamW, AdamWConfig, CosineSchedule};
pub use params::{ParamId, ParamStore};
pub use tape::{cosine, Gradients, Tape, Var};
pub use tensor::Tensor;
