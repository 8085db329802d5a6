//! Masked variational autoencoding over aligned multimodal embeddings.
//!
//! The library trains a small transformer encoder to map an arbitrary subset
//! of per-modality embeddings to a joint Gaussian latent, samples it with the
//! reparameterization trick, and decodes per-modality reconstructions. On top
//! of the trained model it provides hybrid cross-modal retrieval, linear
//! probing of hidden representations, and uncertainty / modality-gap / species
//! diversity analytics, all on deterministic synthetic aligned-embedding data.

pub mod analytics;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod probe;
pub mod retrieval;
pub mod streams;
pub mod trainer;

pub use config::{Activation, LossConfig, LossKind, ModelConfig, RunConfig, SynthConfig, TrainConfig};
pub use data::{Dataset, EmbeddingRecord};
pub use error::{Error, Result};
pub use graph::{Graph, TensorId};
pub use model::{
    EpsSource, LatentGaussian, ModalityId, ModelParams, VisibleSet, MODALITY_NAMES,
};
pub use trainer::{fit, TrainReport};
