//! Depth-range-invariant multi-view stereo.
//!
//! Reconstructs per-view depth maps by matching pixels along epipolar lines
//! with a per-pair 2D cost volume (image plane x epipolar offsets), recovering
//! depth with a closed-form triangulation, and fusing the per-pair estimates
//! across views by a softmax-weighted sum. Estimation runs coarse-to-fine
//! (1/16 then 1/4 resolution) from a randomly initialized depth map, so the
//! declared depth range is never discretized into bins: it only seeds the
//! initialization and filters final outputs.
//!
//! # Modules
//! - [`geom`]: camera math and depth / flow / epipolar-disparity conversions.
//! - [`features`]: per-pixel descriptors and multi-scale average pooling.
//! - [`matching`]: 2D cost volumes along the epipolar line plus the
//!   deterministic cost-peak update and an optional convolutional GRU update.
//! - [`pipeline`]: random initialization, per-pair iteration, multi-view
//!   fusion, coarse-to-fine staging, convex upsampling and loss reporting.
//! - [`fusion`]: geometric-consistency filtering and colored point-cloud
//!   output (PLY).
//! - [`io`]: scene directories, camera text files, PFM depth maps, config.
//! - [`synth`]: synthetic scenes with analytic ground-truth depth.
//! - [`eval`]: accuracy / completeness / overall point-cloud metrics.
//! - [`workflow`]: end-to-end drivers shared by the CLI and the test suite.
//!
//! # Feature flags
//! - `parallel` (default): rayon data-parallel pixel loops. Disabling it
//!   falls back to sequential loops with bit-identical outputs.

pub mod eval;
pub mod features;
pub mod fusion;
pub mod geom;
pub mod io;
pub mod matching;
mod par;
pub mod pipeline;
pub mod synth;
pub mod workflow;

pub use geom::{CameraView, EpipolarFrame, Pixel, ViewPair};
pub use pipeline::{DepthField, PipelineConfig};
