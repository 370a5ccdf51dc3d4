//! File formats: TNSR tensors, `name path` manifests and PGM dumps.

pub mod manifest;
pub mod pgm;
pub mod tnsr;

pub use manifest::ParamStore;
pub use tnsr::{decode, encode, read_tensor, write_tensor};
