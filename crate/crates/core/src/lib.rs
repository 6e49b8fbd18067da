//! Post-hoc failure prediction for contrastive vision-language models.
//!
//! Everything operates on precomputed, L2-normalized image and text
//! embeddings: the zero-shot pipeline of the frozen model, the ViLU
//! uncertainty head (cross-attention over candidate texts feeding an MLP
//! failure classifier), reference baselines, and failure-detection metrics.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod store;
pub mod training;
pub mod vilu;
pub mod zeroshot;

pub use baselines::{Baseline, Method, TemperatureFit};
pub use error::{Error, Result};
pub use metrics::{EvalReport, UncertaintyScorer};
pub use scalar::Scalar;
pub use store::{EmbeddingDataset, Mode, SynthSpec};
pub use training::{LossKind, TrainConfig, TrainHistory, TrainOutcome};
pub use vilu::{Ablation, ViluConfig, ViluModel};
