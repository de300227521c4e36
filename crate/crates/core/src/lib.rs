//! Dual-attention scoring of gigapixel slide images.
//!
//! A soft-attention network looks at a low-magnification view of the slide
//! and proposes where to look; a sampler turns that map into a handful of
//! spatially distinct high-resolution tiles; a recurrent hard-attention agent
//! scores each tile from a short sequence of multi-resolution glimpses.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod glimpse_env;
pub mod grid;
pub mod hard_attention;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod pyramid;
pub mod sampler;
pub mod scalar;
pub mod seed;
pub mod soft_attention;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
pub use grid::{Grid, Mask};
pub use scalar::Scalar;
