//! Domain-augmented deep metric learning.
//!
//! The crate trains small convolutional embedding models under three
//! mechanisms for exploiting 90° rotations: treating them as data
//! augmentation, training one model per rotated domain, or sharing one
//! backbone with an independent embedding objective (and optionally an
//! independent projection head) per domain. Retrieval quality is measured
//! with Recall@K, per domain and on concatenated ensemble embeddings.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod sampling;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use autodiff::{Conv2dAttrs, OpKind, Tape, Var};
pub use data::{Dataset, GlyphConfig, GlyphStyle};
pub use eval::{EmbeddingMatrix, Provenance, RecallReport};
pub use losses::{LossConfig, LossKind};
pub use model::{EmbeddingModel, ModelConfig};
pub use optim::{AdamConfig, AdamState};
pub use sampling::{PkConfig, PkSampler};
pub use tensor::{Tensor, TensorError};
pub use trainer::{Mechanism, MechanismConfig, TrainRun};
pub use transforms::{DataAugConfig, DomainSet};
