pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod pipeline;
pub mod pretrained;
pub mod report;
pub mod tensors;

pub use error::{LabError, Result};
