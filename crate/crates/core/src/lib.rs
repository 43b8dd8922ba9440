//! Saliency-aware pyramid graph reasoning for 2-D segmentation.
//!
//! The crate bundles a small reverse-mode autodiff tensor library, the
//! pyramid global-context reasoning module (attention enhancement, node
//! projection, per-scale graph convolution, multi-scale fusion), a compact
//! UNet that hosts it at the bottleneck, and a training/evaluation harness
//! with deterministic synthetic data.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod pgcr;
pub mod saliency;
pub mod seed;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use pgcr::{PGCRConfig, PgcrParams};
pub use saliency::NodeSet;
pub use tape::{BnMode, PoolMode, Tape, VarId};
pub use tensor::{Scalar, Tensor};
