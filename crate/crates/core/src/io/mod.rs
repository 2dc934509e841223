//! On-disk formats.

pub mod dataset;
pub mod tensorfile;

pub use tensorfile::{read_tensors, write_tensors, TensorData};
