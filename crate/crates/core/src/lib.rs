//! Water segmentation with a hierarchical transformer encoder and all-MLP decoder.

pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod lora;
pub mod mask;
pub mod metrics;
pub mod params;
pub mod segformer;
pub mod tensor;

pub use error::{Error, Result};
