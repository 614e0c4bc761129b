//! Variational fusion of range images into an implicit surface.
//!
//! Every view is turned into a truncated signed distance field (TSDF) and a
//! binary observation weight, stored as an octree that is only refined where
//! the field actually varies. The fused field minimizes an epsL1 data term
//! plus a total-variation smoothness term by gradient descent, and the
//! iterate itself lives in an octree that is split and joined while the
//! solver sweeps over it. A dense-grid solver running the identical update
//! rule serves as the reference.
//!
//! Module map:
//!
//! - [`volume`]: reconstruction domain, pinhole camera, range images.
//! - [`tsdf`]: per-view truncated signed distance fields.
//! - [`octree`]: view trees, the dynamic iterate and the quantization metric.
//! - [`fusion`]: energy, descent update, octree and dense solvers.
//! - [`mesh`]: marching cubes, mesh I/O and vertex-wise differences.
//! - [`synth`]: synthetic sphere datasets with analytic ground truth.
//! - [`dataset`]: the on-disk dataset layout.
//! - [`cli`]: the `synth`, `fuse` and `compare` commands.

pub mod cli;
pub mod dataset;
mod error;
pub mod fusion;
pub mod grid;
pub mod mesh;
pub mod octree;
mod par;
pub mod synth;
pub mod tsdf;
pub mod volume;

pub use error::{Error, Result};
