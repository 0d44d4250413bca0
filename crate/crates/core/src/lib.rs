//! Query-conditioned cross-modal token gating.
//!
//! Synthetic video, audio and sensor streams are encoded into token blocks,
//! concatenated, and scored against a text query. A learned relevance head
//! turns the query-conditioned attention output into one weight per token,
//! and the weighted sum of tokens conditions a small decoder. Training runs
//! in three stages (projection alignment, gating plus LoRA, and fine-tuning
//! on cross-modally corrupted inputs with an entropy penalty).

pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod numcore;
pub mod params;
pub mod perturb;
pub mod pipeline;
pub mod quart;
pub mod seed;
pub mod streams;

pub use error::{Error, Result};
pub use numcore::{Graph, NodeId, Scalar, Tensor};
pub use params::Params;
