//! One-shot federated learning from decentralized distilled datasets.
//!
//! Clients compress their local data into a handful of synthetic points
//! (kernel-inducing-point distillation or a per-class GMM coreset) and upload
//! those once; the server trains a model on the union. The crate also carries
//! the multi-shot and one-shot baselines (FedAvg, FedProx, FedNova, SCAFFOLD),
//! a hybrid variant that shares distilled data between clients, bit-exact
//! uplink accounting, and the gamma communication efficiency score.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar for the common cases.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distill;
pub mod error;
pub mod federation;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type SupportSet64 = kernel::SupportSet<f64>;
pub type SupportSet32 = kernel::SupportSet<f32>;
pub type DistilledDataset64 = distill::DistilledDataset<f64>;
pub type DistilledDataset32 = distill::DistilledDataset<f32>;
pub type GmmModel64 = distill::GmmModel<f64>;
pub type GmmModel32 = distill::GmmModel<f32>;
pub type Weights64 = model::Weights<f64>;
pub type Weights32 = model::Weights<f32>;
pub type RunReport64 = federation::RunReport<f64>;
pub type RunReport32 = federation::RunReport<f32>;
