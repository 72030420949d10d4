//! Structure-aware 3D Gaussian splatting on the CPU.
//!
//! The pipeline, in the order data flows through it:
//!
//! * [`geometry`]: k-NN graphs, local-PCA curvature and midpoint densification
//!   of the sparse input cloud.
//! * [`encoder`]: hash-grid positional encoding, per-point features and the
//!   weighted graph aggregation that produces structural encodings.
//! * [`refine`]: small MLP heads decoding encodings into Gaussian attributes.
//! * [`raster`]: projection, tile-based alpha blending and its analytic
//!   backward pass.
//! * [`trainer`]: L1 + SSIM objective, Adam, growing and pruning.
//! * [`eval`]: PSNR, displacement statistics, depth maps.
//! * [`io`]: COLMAP text scenes, synthetic scenes, checkpoints and PLY.

pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod model;
pub mod raster;
pub mod refine;
pub mod trainer;

pub use error::{Result, SagsError};
pub use imaging::Image;
pub use model::SagsModel;
