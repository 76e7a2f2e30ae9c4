//! Road-map extraction from aerial tiles and crowdsourced GPS trajectories.
//!
//! The pipeline runs in stages that can be used on their own:
//!
//! * [`trajectory`] parses GPS fixes and indexes them on a uniform grid.
//! * [`heatmap`] rasterizes the fixes of one tile into a smoothed heat-map.
//! * [`tensor`] is a small reverse-mode differentiation engine with the
//!   convolution, pooling and loss kernels the network needs.
//! * [`net`] is the two-branch encoder/decoder with cross-modal enhancement
//!   between the branches, plus training and checkpoints.
//! * [`metrics`] binarizes probability maps and scores them with IoU.
//! * [`dataset`] holds augmentation and a synthetic scene generator.

pub mod dataset;
pub mod error;
pub mod heatmap;
pub mod kv;
pub mod metrics;
pub mod net;
pub mod par;
pub mod raster;
pub mod tensor;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
