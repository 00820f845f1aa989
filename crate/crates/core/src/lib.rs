//! Sentence-level language modelling over a frozen sentence autoencoder.
//!
//! A small encoder/decoder ([`codec`]) maps sentences to fixed-width
//! embeddings and back. A causal transformer ([`concept`]) predicts the next
//! embedding, trained either through the frozen decoder's token
//! cross-entropy, with MSE, or as a plain token-level baseline
//! ([`training`]). Everything runs on a small reverse-mode autodiff engine
//! ([`autodiff`]) in 64-bit floats.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod concept;
pub mod config;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod text;
pub mod training;

pub use analysis::{ArchShape, Crossover, FlopsModel, ScalingFit};
pub use autodiff::{grad_check, Gradients, Tape, Var};
pub use checkpoint::Checkpoint;
pub use codec::{CodecConfig, CodecTrainConfig, FrozenCodec, SentenceCodec, SentenceEmbedding};
pub use concept::{ConceptModelConfig, ConceptTransformer, HeadKind, TokenLm};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use inference::{GenerationResult, StopReason, StopRule};
pub use metrics::{MetricReport, PrefixMode};
pub use optim::AdamConfig;
pub use tensor::Tensor;
pub use text::{Document, Vocabulary};
pub use training::{LossReport, Model, Objective, TrainConfig};
