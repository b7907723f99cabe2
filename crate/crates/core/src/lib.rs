//! Instrument-target-verb triplet detection.
//!
//! Frames are encoded by a convolutional trunk and a transformer encoder; a
//! class-token transformer conditioned on detected instruments predicts target
//! presence; a bipartite interaction graph from instrument instances to target
//! tokens scores each pairing and predicts a verb for it.

pub mod backbone;
pub mod config;
pub mod data;
pub mod dataset;
pub mod decoder;
pub mod eval;
pub mod error;
pub mod graph;
pub mod mcit;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod supervision;
pub mod synth;
pub mod train;
pub mod vocab;

pub use config::RunConfig;
pub use data::{BoxXYXY, Detection, FrameAnnotation, FramePredictions, TripletDetection};
pub use dataset::Dataset;
pub use error::{Error, Result};
pub use vocab::{LabelVocabulary, TripletComponents};
