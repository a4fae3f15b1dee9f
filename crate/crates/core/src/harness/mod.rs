//! Experiment plumbing: synthetic corpora, seeded streams, k-fold runs,
//! latent sampling and checkpoints.

pub mod checkpoint;
pub mod experiment;
pub mod generative;
pub mod seeds;
pub mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use experiment::{kfold_split, run_experiment, ExperimentConfig, ExperimentReport};
pub use generative::{extrapolate, interpolate, Extrapolation};
