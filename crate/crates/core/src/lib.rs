//! Few-shot class-incremental learning: session protocol, prototype
//! geometry, contrastive and alignment losses, augmentations, subnetwork
//! tuning, metrics and the end-to-end training pipeline.

pub mod augment;
pub mod baseline;
pub mod config;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod protocol;
pub mod record;
pub mod rng;
pub mod subnet;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use config::{DataSource, ExperimentConfig, TrickToggles};
pub use data::{Dataset, Image, LabeledSample, Split};
pub use geometry::{EtfFrame, Prototype, PrototypeClassifier};
pub use metrics::{GeometryReport, SessionResult};
pub use pipeline::{run_experiment, RunOptions, RunOutcome, RunState};
pub use protocol::{build_task_stream, StreamParams, TaskStream};
pub use record::ExperimentRecord;
