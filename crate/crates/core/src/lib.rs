//! Language-embedded Gaussian splats with masklet-consistent supervision.
//!
//! The crate covers the whole path from per-frame region proposals to 3D
//! open-vocabulary queries: deduplicated masklet extraction, multi-view
//! feature averaging, a small latent codec, a tiled feature rasterizer with
//! an L1 language loss, two-step queries with density filtering, metrics, a
//! synthetic world for verification and the on-disk interchange formats.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod cluster;
pub mod codec;
pub mod error;
pub mod features;
pub mod io;
pub mod masklet;
pub mod metrics;
pub mod pipeline;
pub mod query;
pub mod raster;
pub mod scene;
pub mod synthetic;
pub mod train;

pub use codec::{CodecParams, CodecTrainConfig};
pub use error::{Error, Result};
pub use features::{FeatureRaster, ImageEmbedder, RegionFeatureBank};
pub use masklet::{Mask, MaskletSet, RegionIdRaster, RegionMask, Segmenter, Tracker};
pub use query::{QueryConfig, QueryResult};
pub use scene::{CameraPose, Frame, FrameSequence, GaussianBundle, RgbImage};
pub use train::TrainConfig;
