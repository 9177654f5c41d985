//! Lane-change intention prediction on highD-style trajectory data.
//!
//! The crate covers the whole experimental pipeline: parsing recordings
//! ([`highd_io`]), cutting and labelling observation windows
//! ([`segmentation`]), building the 36-column feature matrices
//! ([`features`]), a small reverse-mode autodiff engine ([`nn`]), the LSTM,
//! CNN and transformer classifiers ([`models`]), training and every metric
//! used to compare them ([`train_eval`]), and a synthetic corpus generator
//! ([`synthetic`]) for running all of it without the real dataset.

pub mod error;
pub mod features;
pub mod highd_io;
pub mod models;
pub mod nn;
pub mod prepared;
pub mod rng;
pub mod segmentation;
pub mod synthetic;
pub mod train_eval;

pub use error::{Error, Result};
pub use features::{FeatureMatrix, Normalizer, FEATURE_COUNT};
pub use highd_io::{Direction, NeighborRole, Recording, RecordingMeta, Track, TrackState};
pub use segmentation::{DatasetConfig, Label, Segment, Split, SplitDataset};
