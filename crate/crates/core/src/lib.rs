//! Offline reinforcement learning with flow-matching policies.
//!
//! The crate bundles everything needed to train and study flow policies on
//! small 2D benchmarks:
//!
//! - [`autodiff`]: a define-by-run reverse-mode tape over dense `f64` tensors;
//! - [`nets`]: MLPs, Fourier time embeddings, Adam and Polyak updates;
//! - [`flow`]: the state-conditioned vector field, Euler flow map and
//!   conditional flow matching loss;
//! - [`value`]: the outer critic ensemble and the flow-consistent
//!   intermediate value network;
//! - [`trainers`]: Q-Flow (intermediate value gradient matching) and the
//!   comparison methods (BPTT, one-step distillation, weighted regression,
//!   rejection sampling and two ablations);
//! - [`envs2d`]: dataset generators with manifold-aligned rewards;
//! - [`analysis`]: flow-consistency reports, value landscapes, sample
//!   quality metrics and step timing.

pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod envs2d;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod nets;
pub mod rng;
pub mod svg;
pub mod trainers;
pub mod value;

pub use autodiff::{Tape, Tensor, Var};
pub use config::{Aggregation, Method, Profile, TrainConfig};
pub use envs2d::{DatasetName, OfflineDataset2D, RewardSpec};
pub use error::{Error, Result};
pub use flow::FlowPolicy;
pub use nets::{Activation, AdamState, FourierEmbed, Mlp, MlpSpec};
pub use value::{CriticEnsemble, InterValueNet};
