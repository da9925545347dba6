//! Differentiable tile-based Gaussian splatting.
//!
//! The render path is `project` → tile binning → `render`; the backward path
//! mirrors it with `backward_per_gaussian` (or the per-pixel reference) and
//! `project_vjp`. [`trainer`] ties these into the optimization loop.

pub mod bench;
pub mod binning;
pub mod density;
pub mod image_io;
pub mod ingest;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod pose;
pub mod projection;
pub mod raster;
pub mod scene;
pub mod sh;
pub mod synthetic;
pub mod trainer;

pub use scene::TILE_SIZE;
