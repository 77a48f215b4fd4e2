//! Experiment runner for the distillation-based federated simulator.

pub mod config;
pub mod runner;
