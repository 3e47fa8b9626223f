//! Adversary-correction fine-tuning for dense ReLU classifiers.
//!
//! A pre-trained network is moved as little as possible, in Euclidean
//! distance over its parameters, until a given set of adversarial examples
//! is classified correctly while the training loss stays put. The nonlinear
//! constraints are replaced by linear cuts gathered at successive iterates,
//! and each iterate is the projection of the original parameters onto the
//! current cuts.
//!
//! Modules:
//!
//! - [`nn`]: the network, its forward pass and exact gradients.
//! - [`trainer`]: baseline training and retraining with adversarial data.
//! - [`attacks`]: FGSM and PGD, and construction of adversarial sets.
//! - [`cuts`]: linearized constraints in parameter space.
//! - [`qp`]: projection onto an intersection of halfspaces.
//! - [`finetune`]: the iteration, candidate pool and model selection.
//! - [`data`]: MNIST IDX files, synthetic data and checkpoints.

pub mod attacks;
pub mod cuts;
pub mod data;
pub mod error;
pub mod finetune;
pub mod nn;
pub mod qp;
pub mod trainer;

pub use attacks::{AdversarialExample, AdversarialSet, AttackConfig, AttackKind};
pub use cuts::{Cut, CutKind, CutPool, SparseVector};
pub use data::{Checkpoint, CheckpointMeta, FloatEncoding, SyntheticConfig, SyntheticKind};
pub use error::{Error, Result};
pub use finetune::{Candidate, FinetuneConfig, FinetuneOutcome, HistoryRecord};
pub use nn::{Architecture, DenseLayer, LabeledDataset, Network, ParamVector};
pub use qp::{QpInstance, QpSettings, QpSolution, QpStatus};
pub use trainer::{OptimizerKind, TrainConfig};
