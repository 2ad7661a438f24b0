//! Stochastic variational Bayesian sparse spectrum Gaussian process regression.
//!
//! The spectral frequencies and nuisance amplitudes of a sparse spectrum GP
//! are given an affine variational posterior `alpha = M z + b`, trained by
//! stochastic gradient ascent on the evidence lower bound using k-means
//! blocks of the training data. Predictions average local test conditionals
//! over posterior samples.

pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod gradient;
pub mod localmodel;
pub mod model;
pub mod optimizer;
pub mod partition;
pub mod predict;
pub mod variational;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use features::{approx_kernel, basis_jacobian, basis_vector, feature_matrix, FrequencyBlock, SpectralConfig};
pub use gradient::{
    elbo_estimate, log_likelihood, partition_term, stochastic_gradient, EtaGradient, GradientSamplePlan,
};
pub use localmodel::{build_local_gram, test_conditional, AlphaVector, LocalGram, PredictiveMoments};
pub use partition::{assign_block, kmeans_partition, PartitionedDataset};
pub use variational::{kl_term_gradient, log_prior, log_q, transform, PriorSpec, VariationalState};
pub use model::{fit, Checkpoint, TrainedModel};
pub use optimizer::{train, StepSchedule, TrainConfig};
pub use predict::{evaluate, mnlp, predict_batch, predict_point, rmse, Model, PredictConfig};
