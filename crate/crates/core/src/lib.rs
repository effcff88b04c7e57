//! Masked-autoencoder transformer for multivariate sensor windows, with full
//! fine-tuning, LoRA and QLoRA adaptation evaluated leave-one-dataset-out.
//!
//! Module map:
//! - [`numerics`]: matrices, parameters, the gradient tape and the RNG.
//! - [`model`]: patching, the pre-norm transformer encoder, MAE decoder/loss.
//! - [`peft`]: LoRA adapters, NF4 quantization and model wrapping.
//! - [`finetune`]: classification head, strategies, Adam and the training loop.
//! - [`data`]: synthetic generation, ingestion, preprocessing and LODO folds.
//! - [`eval`]: metrics, parameter/memory accounting, LODO runs and sweeps.
//! - [`io`]: the binary container used for checkpoints and window caches.

pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod io;
pub mod model;
pub mod numerics;
pub mod peft;

pub use error::{Error, Result};
