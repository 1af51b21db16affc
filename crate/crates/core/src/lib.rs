//! Speaker embeddings with double multi-head self-attention pooling.
//!
//! The crate covers the whole pipeline: log-Mel features, a VGG-style CNN
//! front-end, interchangeable pooling layers (statistical, self-attention,
//! multi-head and double multi-head self-attention), a fully connected
//! classifier head whose second layer is the speaker embedding, training, and
//! verification/classification metrics.

pub mod audio;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
