//! Weight-matrix compression with jointly learnable codebooks and mappings.

mod bytes;
pub mod cluster;
pub mod container;
pub mod error;
pub mod learner;
pub mod matrix;
pub mod model;
pub mod packfmt;
pub mod pipeline;
pub mod planner;
pub mod reorder;

pub use cluster::{ClusterResult, ClusteringMethod, Samples};
pub use container::{load_calibration, load_container, save_calibration, save_container};
pub use error::{Error, Result};
pub use learner::{finalize, optimize_layer, MappingRule, Schedule, SoftMapping};
pub use matrix::Matrix;
pub use model::{Activation, CalibrationSet, Capture, LinearLayer, ModelContainer, StorageDtype};
pub use planner::{derive_plan, predicted_footprint, CompressionPlan, Mode};
pub use reorder::{reconstruct, reorder, CodebookSet, HardMapping, ReorderResult, ScaleEstimator};
pub use packfmt::{
    deserialize_compressed, measure_footprint, pack_indices, serialize_compressed, unpack_indices, CompressedLayer,
    CompressedModel, FootprintReport,
};
pub use pipeline::{compress_model, evaluate, CompressionOutput, Metrics, ModeChoice, RunConfig};
