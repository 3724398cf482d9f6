//! Multi-modal time-series question answering at desk scale: synthetic data,
//! patch-aligned numeric/visual/caption expansion, contrastive alignment,
//! residual quantisation with modality disentanglement, query highlighting and
//! a small autoregressive decoder, all on a self-contained autodiff tape.

pub mod assembly;
pub mod cth;
pub mod config;
pub mod datagen;
pub mod ddi;
pub mod diagnostics;
pub mod diffcore;
pub mod encoders;
pub mod evalmetrics;
pub mod error;
pub mod expansion;
pub mod pa;

pub use error::{MadiError, Result};
