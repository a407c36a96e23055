//! Structured Gaussian process latent variable model.
//!
//! A Bayesian GP-LVM whose generative model carries an explicit parameterized
//! spatial kernel over the within-example observation grid. Training uses a
//! collapsed variational bound evaluated through Kronecker-factored kernel
//! algebra (linear cost in the training data); test-time latent inference
//! optimizes a partially-collapsed bound with the trained model frozen, and
//! predictions are spatially correlated, which enables missing-pixel
//! imputation via conditioning and super-resolution outputs.

pub mod bound;
pub mod error;
pub mod infer;
pub mod io;
pub mod kernels;
pub mod kron;
pub mod latent;
pub mod model;
pub mod opt;
pub mod predict;
pub mod psi;

pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelSpec};
pub use latent::{LatentMode, VariationalLatent};
pub use model::{initialize, train, ModelConfig, ObservationGrid, SgplvmModel, TrainConfig};
