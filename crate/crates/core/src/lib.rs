//! Gaussian-process activations (GAPA) for frozen networks.
//!
//! The library retrofits a pretrained network with activation-space
//! epistemic uncertainty while preserving its point predictions exactly:
//!
//! 1. **Cache** — run the reference data once through the frozen backbone
//!    and log pre-activations at chosen activation layers ([`cache`]).
//! 2. **Compress** — reduce each cache to M inducing inputs (k-means++ or
//!    farthest-point) and fix RBF hyperparameters from activation
//!    statistics ([`inducing`]).
//! 3. **Index** — build an exact or coarse-IVF nearest-neighbor index over
//!    the inducing inputs ([`neighbor`]).
//! 4. **Infer** — replace each chosen activation with a GP whose posterior
//!    mean is the original nonlinearity; condition its variance on the K
//!    nearest inducing points ([`gpact`]) and push mean/variance state
//!    through the remaining frozen layers in a single deterministic pass
//!    ([`propagate`]).
//! 5. **Predict & evaluate** — map output-layer Gaussians to task
//!    predictions and uncertainty splits ([`heads`]), scored by [`metrics`].
//!
//! All numerics are f64; caches store f32 on disk and widen on load.

pub mod cache;
pub mod container;
pub mod error;
mod fileio;
pub mod gpact;
pub mod heads;
pub mod inducing;
pub mod metrics;
pub mod neighbor;
pub mod network;
pub mod propagate;
pub mod tensor;

pub use error::{GapaError, Result};
