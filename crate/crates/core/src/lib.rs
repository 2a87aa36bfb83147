//! Rigid 2D/3D registration of a volume to a single projection image.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithmic piece:
//!
//! - [`pose`]: six-parameter rigid poses, homogeneous matrices, geodesic
//!   distances and gradients on SO(3) x R^3.
//! - [`volume`]: voxel grids, masks, the procedural spine phantom.
//! - [`projector`]: ray-cast DRRs, projected masks, finite-difference pose gradients.
//! - [`similarity`]: image similarity metrics and the pose-parameter loss.
//! - [`nn`]: a small reverse-mode tensor engine with the layers the networks use.
//! - [`rtpi`]: the pose-initialization regressor and its training loop.
//! - [`finereg`]: embedded-feature encoders, the masked feature error, the
//!   direction-matching training loss and the iterative refinement loop.
//! - [`pipeline`]: optimization baselines and the two-stage strategies.
//! - [`eval`]: pose sampling and per-case error metrics.
//!
//! File formats, threading, the study harness and the CLI live in the `xreg` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod finereg;
pub mod image;
pub mod math;
pub mod nn;
pub mod pipeline;
pub mod pose;
pub mod projector;
pub mod rtpi;
pub mod similarity;
pub mod volume;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use image::{Image, MaskImage, RgbImage};
pub use pose::{GradVec, Mat4, Pose};
pub use projector::{FdStep, Intrinsics};
pub use volume::{PhantomSpec, Volume, VoxelMask};
