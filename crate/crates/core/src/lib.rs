//! Channel-tokenized vision transformer with self-distillation pretraining and
//! a cross-band evaluation harness for multispectral and SAR imagery.

pub mod adapt;
pub mod bands;
pub mod bench;
pub mod data;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod numeric;
pub mod pretrain;
pub mod vit;

pub use error::{Error, Result};
