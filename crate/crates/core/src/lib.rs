//! Content-augmented feature pyramid with light linear transformers.
//!
//! A training-free forward pipeline built on a small dense-tensor substrate:
//!
//! - [`tensor`] and [`ops`]: NCHW tensors and the primitive operations
//!   (convolution, softmax, normalization, resampling, bilinear sampling).
//! - [`grad`]: a tape-based reverse-mode evaluator for the attention path
//!   and a central-difference Jacobian oracle.
//! - [`attention`]: exact softmax attention, the first-order Taylor
//!   linearization in brute-force and factored forms, and both multi-head
//!   schemes.
//! - [`gcem`]: the global content extractor (dense blocks of compression,
//!   modulated deformable convolution and residual spatial attention).
//! - [`pyramid`]: a seeded toy backbone, FPN fusion and the content-augmented
//!   assembly.
//! - [`complexity`], [`gradcheck`], [`selfcheck`], [`demo`]: instrumentation
//!   and verification harnesses used by the `cafpn` command-line tool.

pub mod attention;
pub mod complexity;
pub mod counter;
pub mod demo;
mod error;
pub mod gcem;
pub mod grad;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod ops;
pub mod pyramid;
pub mod selfcheck;
pub mod tensor;

pub use attention::{AttentionConfig, Pointwise, ProjectionSet, SequencedMap};
pub use counter::OpCounter;
pub use error::{Error, Result};
pub use gcem::{DcnV2Params, GcemConfig, GcemParams};
pub use ops::ConvSpec;
pub use pyramid::{CaFpnParams, FeatureMap, PyramidConfig};
pub use tensor::{DType, Tensor};
