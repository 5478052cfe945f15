//! One-shot federated learning simulator with bi-level personalization of
//! a toy latent diffusion model.
//!
//! Clients upload noised interpolated latents plus learned concept vectors
//! exactly once; the server synthesizes training data from the uploads and
//! trains a classifier. The crate also ships multi-round and centralized
//! baselines plus a quantitative privacy-evaluation suite.

pub mod config;
pub mod baselines;
pub mod benchmark;
pub mod classifier;
pub mod client;
pub mod container;
pub mod error;
pub mod ldm;
pub mod nn;
pub mod partition;
pub mod pipeline;
pub mod plot;
pub mod privacy_eval;
pub mod rng;
pub mod server;
pub mod types;

pub use config::{AblationToggles, ModelDims, PartitionMode, RunConfig};
pub use error::{Error, Result};
pub use types::{
    ClientDataset, ClientUpload, ConceptVectors, Image, LabeledExample, LatentTensor,
    NoiseSchedule,
};
