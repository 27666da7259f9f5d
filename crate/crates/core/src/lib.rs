//! Layered depth map view synthesis.
//!
//! Differentiable LDM rendering, a multi-step update-and-fuse network built on
//! one-to-many cross-attention, synthetic plane scenes for ground truth, and
//! small optimization harnesses, all on a self-contained reverse-mode tape.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod ldm;
pub mod network;
pub mod params;
pub mod scenes;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
