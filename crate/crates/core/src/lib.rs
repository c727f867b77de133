//! Desk-scale multi-source domain-generalization training.
//!
//! The crate trains classifiers that stay usable when the test data comes
//! from a domain never seen in training. It combines:
//!
//! - bias-regularized classifier learning: a shared visual-world head plus
//!   per-domain bias heads `w_i = alpha_i (*) w_vw + delta_i`, with norm
//!   penalties pushing domain-specific signal into the bias heads;
//! - multi-layer cross-gradient training (MCT): a domain classifier on the
//!   frozen embedding provides gradient directions used to perturb a randomly
//!   chosen layer activation, and the suffix of the network is retrained on
//!   the perturbed point;
//! - bias measurement: cross-dataset performance drop, classifier two-sample
//!   tests, AUC, and embedding export;
//! - controlled data generators (confounded feature blocks, rotated glyph
//!   domains) so the failure mode being fixed is reproducible on a laptop.
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tape::Tape`])
//! over dense f64 tensors.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use heads::{BiasHeadBank, DomainClassifier};
pub use losses::{DomainWeighting, LossWeights, TaskMode};
pub use network::{Activation, LayeredNet, TapSet, INPUT_TAP};
pub use tape::{Gradients, Tape, ValueId};
pub use tensor::Tensor;
pub use trainer::{DomainBatch, Strategy, TapSelector, TrainConfig, TrainedModel};
