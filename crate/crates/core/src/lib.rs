//! Deep metric learning with a structured facility-location clustering loss.
//!
//! The crate is organized bottom-up:
//!
//! * [`embedding`]: dense batch primitives (distances, similarities, row normalization).
//! * [`facility`]: the facility-location score, nearest-medoid assignment and the
//!   per-class oracle score.
//! * [`metrics`]: NMI, the structured margin `1 - NMI` and Recall@K.
//! * [`inference`]: loss-augmented inference (greedy selection, PAM-style refinement,
//!   exhaustive search for small instances).
//! * [`loss`]: the structured clustering loss and its subgradient.
//! * [`baselines`]: triplet (semi-hard), lifted structured and N-pairs losses.
//! * [`model`]: a small MLP embedding network with explicit backprop.
//! * [`optim`]: RMSprop, the margin-multiplier schedule and the training loop.
//! * [`data`]: synthetic datasets, CSV I/O, class splits and the batch sampler.

pub mod baselines;
pub mod data;
pub mod embedding;
mod error;
pub mod facility;
pub mod inference;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
mod par;

pub use error::{Error, Result};

pub use embedding::{DistanceMatrix, EmbeddingBatch, SimilarityMatrix};
pub use facility::{Labels, MedoidSet};
pub use inference::{InferenceResult, PamOptions};
pub use loss::LossOutput;
pub use model::{MlpGrads, MlpParams};
pub use optim::{LossKind, TrainConfig, TrainRecord};
