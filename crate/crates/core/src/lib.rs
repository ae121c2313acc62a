//! Desk-scale stereo matching: a learned stereo network with a
//! top-k regressed cost volume, left-right consistency refinement and
//! learned upsampling, plus training, evaluation and file I/O.

pub mod ablation;
pub mod aggregation;
pub mod checkpoint;
pub mod cost_volume;
pub mod disparity;
mod error;
pub mod features;
pub mod io;
pub mod loss;
pub mod lrr;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod regression;
pub mod synth;
pub mod train;
pub mod upsample;

pub use checkpoint::Checkpoint;
pub use cost_volume::VolumeKind;
pub use disparity::DisparityMap;
pub use error::{Error, Result};
pub use metrics::{compute_metrics, MetricsReport};
pub use model::{Model, ModelConfig};
pub use tdstereo_tensor as tensor;
