//! Generative self-supervised pretraining for brain MRI tumor classification.
//!
//! A hybrid residual-CNN/transformer generator is trained adversarially to
//! translate one MRI sequence into another. Its encoder and bottleneck then
//! seed a classifier, fine-tuned on real slices plus synthetic ones.

pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod training;
mod util;

pub use error::{Error, Result};
pub use util::{derive_seed, sha256_hex};
