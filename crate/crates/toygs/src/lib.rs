//! Desk-scale 3D Gaussian splatting for large free camera trajectories.
//!
//! The pipeline partitions cameras and the sparse point cloud into regions by
//! clustering camera positions, trains an independent Gaussian cloud per
//! region (with Patchmatch multi-view depth refinement and position-aware
//! adaptive density control), and at render time routes each view either to a
//! region's local cloud or to the merged global cloud.
//!
//! Entry points:
//! - [`scene`]: cameras, points, Gaussians, COLMAP ingestion, synthetic scenes
//! - [`partition`]: k-means regions, visibility-ratio camera selection
//! - [`raster`]: forward splatting of color / depth / normal frames
//! - [`train`]: photometric loss, analytic gradients, Adam, density control
//! - [`patchmatch`]: plane-hypothesis depth optimization and repositioning
//! - [`router`]: local/global route decisions and the merged global cloud
//! - [`metrics`]: PSNR / SSIM and the Gaussian-count memory proxy
//! - [`pipeline`]: file-based stage runner used by the `toygs` binary

pub mod error;
pub mod metrics;
pub mod partition;
pub mod patchmatch;
pub mod pipeline;
pub mod raster;
pub mod router;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
