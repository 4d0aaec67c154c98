//! Variational autoencoders with Gaussian, autoregressive-flow and
//! diffusion latent priors, on a small reverse-mode autodiff engine.

// Negated float comparisons are how NaN gets rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod prior;
pub mod tensor;
pub mod training;
pub mod vae;

pub use checkpoint::Checkpoint;
pub use config::{TimeSampling, TrainConfig};
pub use data::{Dataset, Split, ToyKind};
pub use diffusion::{DenoiserNet, DiffusionPrior, VarianceSchedule};
pub use error::{CheckpointError, ConfigError, Error, Result};
pub use flow::FlowPrior;
pub use metrics::{BoundDiagnostics, MetricReport};
pub use nn::{Activation, Adam, AdamConfig, Mlp};
pub use prior::{PriorKind, PriorModel};
pub use tensor::{GradientMap, Tensor};
pub use training::{EpochRecord, LossBreakdown, PriorTrainOptions, TrainOutcome, VaeWithPrior};
pub use vae::{LikelihoodKind, VaeModel};
