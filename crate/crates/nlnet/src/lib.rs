//! Non-local operations and non-local blocks as a standalone, fully
//! differentiable tensor operator family, embedded in small C2D/I3D video
//! backbones.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense f64/f32 tensors and reverse-mode
//!   differentiation on a Wengert tape, with an independent
//!   finite-difference checker in [`gradcheck`].
//! - [`pairwise`]: the four pairwise affinity functions (Gaussian, embedded
//!   Gaussian, dot product, concatenation) and their normalization rules.
//! - [`nonlocal`]: the non-local operation and the residual non-local block,
//!   with spacetime/space/time masking and spatial key subsampling.
//! - [`backbone`]: toy C2D and inflated I3D residual networks, non-local
//!   block insertion policies, cost accounting, and checkpointing.
//! - [`data`] / [`train`] / [`attention`]: synthetic long-range video tasks,
//!   a seeded SGD loop with step LR schedule, and attention-weight
//!   extraction.
//! - [`verify`]: the runnable verification suites (oracle equivalence,
//!   gradient checks, identity-at-init, inflation equivalence).
//!
//! All numeric code is generic over the scalar type via [`scalar::Scalar`];
//! the type aliases below pin the f64 instantiation used by the CLI and the
//! verification suites.

pub mod attention;
pub mod backbone;
pub mod container;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod mask;
pub mod nonlocal;
pub mod oracle;
pub mod pairwise;
pub mod scalar;
pub mod shape;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use shape::Shape;

/// Default 64-bit instantiations. Gradient checks and checkpoints are
/// specified against these.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = tape::Tape<f64>;
pub type Network64 = backbone::Network<f64>;
pub type Dataset64 = data::Dataset<f64>;

/// 32-bit instantiations, for callers that want the same operator family at
/// single precision.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape32 = tape::Tape<f32>;
