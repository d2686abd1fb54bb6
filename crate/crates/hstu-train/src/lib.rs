//! Training harness for the sequential-recommendation core: synthetic data
//! generation, CSV log ingestion, a simulated-rank training loop with
//! optional stochastic-length scheduling, evaluation, and scaling/quantizing
//! utilities shared by the `hstu` command-line binary.

pub mod config;
pub mod data;
pub mod kuairand;
pub mod optim;
pub mod sim;
pub mod synth;
pub mod trainer;
