//! Topic-guided sentence generation from multimodal feature vectors.
//!
//! The pipeline mines latent topics from paired (features, captions) records
//! with multimodal kernel K-means, trains a student network to predict those
//! topics from features alone, and decodes sentences with an LSTM whose gate
//! matrices are topic-conditioned three-way factorizations.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod numerics;
pub mod predictor;
pub mod topic_mining;
pub mod trainer;

pub use error::{Error, Result};
