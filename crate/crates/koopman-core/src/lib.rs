//! Koopman operator learning in reproducing kernel Hilbert spaces.
//!
//! Trajectory data and kernel-section observables are turned into Gram
//! matrices, an estimate `K = sum a_kl z_k (x) g_l` is fitted by one of the
//! regularized solvers, and the estimate is used for spectra and prediction.

pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod linalg;
pub mod operator;
pub mod solvers;

pub use error::{KoopmanError, Result};
