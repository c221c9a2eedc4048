//! Multi-label text classification as set prediction.
//!
//! A transformer encoder reads the text; a non-autoregressive decoder turns
//! `m` label queries into `m` distributions over `K` labels plus an empty
//! label. The queries come from a GCN over the training label co-occurrence
//! graph. Training matches predictions to gold labels with the Hungarian
//! algorithm and adds a Bhattacharyya overlap penalty between predictions.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod diversity;
pub mod encoder;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use config::{RawSplits, RunConfig};
pub use data::{Corpus, Dataset, LabelVocabulary, RawSample, Sample, Split};
pub use error::{Error, ErrorClass, Result};
pub use graph::LabelGraph;
pub use metrics::{MetricAccumulator, Metrics};
pub use model::{Head, Model, ModelConfig, ModelSettings};
pub use synthetic::SyntheticSpec;
pub use tensor::Tensor;
pub use train::TrainConfig;
pub use vocab::TokenVocabulary;
