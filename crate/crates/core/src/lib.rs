//! Spectral graph-convolutional beta-VAE for corpora of triangle meshes that
//! share one connectivity.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`], [`sparse`]: mesh type, IO, adjacency and sparse matrices.
//! * [`autodiff`]: a small reverse-mode tape over dense/sparse matrix ops.
//! * [`spectral`], [`pooling`]: Chebyshev graph convolution and
//!   quadric-error mesh pooling.
//! * [`model`]: encoder/decoder, losses and training.
//! * [`procaug`]: Procrustes alignment and augmentation.
//! * [`analysis`]: metrics, PCA baseline and latent-mode ranking.
//! * [`harness`]: synthetic data, experiments, sampling and checkpoints.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod mesh;
pub mod model;
pub mod pooling;
pub mod procaug;
pub mod sparse;
pub mod spectral;
mod util;

pub use error::{Error, Result};
pub use mesh::{Face, Mesh, Vec3};
pub use sparse::SparseMatrix;
