//! Desk-scale federated learning simulator: a dense NN substrate with
//! reverse-mode autodiff, group-distillation local training, Dirichlet
//! non-IID partitioning, weighted aggregation, and forgetting metrics.

pub mod config;
pub mod data;
pub mod distill;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod runner;
pub mod scalar;
pub mod seeding;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::Tensor;
