//! Self-supervised multi-object tracking on temporal object appearance graphs.

pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod toag;
pub mod tracker;
pub mod trainer;

pub use config::{Preset, RunConfig};
pub use error::{Error, Result};
pub use geometry::{BBox, Cluster, Detection};
pub use metrics::{Annotation, EvalReport};
pub use pipeline::SequenceData;
pub use tracker::{Metric, Mode, TrackerConfig};
pub use trainer::{EmbedderModel, TrainConfig};
