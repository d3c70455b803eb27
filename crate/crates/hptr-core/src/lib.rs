//! Pairwise-relative polyline transformer for multi-modal trajectory
//! prediction.
//!
//! Everything is built on a small self-contained stack:
//!
//! - [`tensor`]: dense row-major tensors with reverse-mode autodiff,
//! - [`geometry`]: SE(2) pose algebra and k-nearest-neighbor selection,
//! - [`encoding`]: sinusoidal position/angle encodings of relative poses,
//! - [`knarpe`]: k-nearest-neighbor attention with relative pose encoding,
//! - [`polyline`]: map / traffic-light / agent token encoders,
//! - [`model`]: the hierarchical transformer and its output heads,
//! - [`training`]: losses, hard assignment and a toy training loop,
//! - [`runtime`]: streaming sessions with cached static features,
//! - [`scenario`]: scenario file format and synthetic generation,
//! - [`bench`]: scaling benchmark comparing token-sharing strategies.

pub mod bench;
pub mod encoding;
pub mod geometry;
pub mod knarpe;
pub mod model;
pub mod nn;
pub mod polyline;
pub mod runtime;
pub mod scalar;
pub mod scenario;
pub mod tensor;
pub mod training;
pub mod weights;

pub use scalar::Scalar;
