//! Desk-scale instance-feature conditioning for a toy latent diffusion model.
//!
//! The crate trains a small convolutional denoiser on a synthetic corpus of
//! colored shapes, then bolts an instance-feature adapter onto its
//! cross-attention sites: per-instance appearance tokens are built from a
//! frozen hash-bucket text encoder, rasterized box masks turn them into a
//! per-cell instance semantic map, and a tanh-gated residual injects that map
//! into the frozen base model. An evaluation pipeline (toy detector, template
//! verifier, IoU matching, AP, Fréchet distance) measures layout faithfulness.
//!
//! Start with the `examples/` directory — each file exercises one capability
//! end to end:
//!
//! ```text
//! cargo run --release -p ifadapter --example autodiff_gradients
//! cargo run --release -p ifadapter --example generate_dataset
//! cargo run --release -p ifadapter --example appearance_tokens
//! cargo run --release -p ifadapter --example instance_semantic_map
//! cargo run --release -p ifadapter --example train_and_sample
//! cargo run --release -p ifadapter --example evaluate_metrics
//! ```
//!
//! The same functionality is reachable through the thin `ifal` binary
//! (`gen-data`, `pretrain`, `train-adapter`, `sample`, `eval`).

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod layout;
pub mod manifest;
pub mod nn;
pub mod tensor;
pub mod text;

pub use tensor::{backward, Gradients, Tensor};

/// Crate-wide error type. Validation and usage problems map to CLI exit
/// code 2, numeric failures to exit code 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// CLI exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
