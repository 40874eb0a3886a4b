//! Paraphrase generation with a pattern-conditioned transcoder trained
//! adversarially against a multi-class Wasserstein critic.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod critic;
pub mod embeddings;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod seqnets;
pub mod trainer;

pub use error::{Error, Result};
