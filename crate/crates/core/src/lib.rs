//! Two-stage center-based 3D detection on synthetic LiDAR scenes, with the
//! inference-optimization passes and latency profiler around it.

// `!(x > 0.0)` style guards are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod head;
pub mod matching;
pub mod optimize;
pub mod pipeline;
pub mod roi;
pub mod scene;
pub mod tensor;
pub mod voxel;

pub use error::{Error, Result};
