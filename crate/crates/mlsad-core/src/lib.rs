//! Multi-level structure anomaly detection.
//!
//! The pipeline trains, per level s in {1, 2, 4, ...}: a sampler that keeps
//! s/2-scale local structure while breaking everything above it (uniform
//! noise at level 0, batch-axis pixel shuffling at level 1, entropy-
//! regularized patch GANs above), and a stride-1 patch detector contrasting
//! normal images against those samples and against randomized coordinate
//! maps. Scores aggregate across patches and levels into one anomaly score
//! per image; a gradient-descent probe searches image space for false
//! negatives.
//!
//! The `mrf::oracle` module verifies the distributional backbone exactly on
//! enumerable toy spaces: maximum-entropy fits under patch-marginal
//! constraints, their factorization, and the support-set characterization.

pub mod aggregation;
pub mod data;
pub mod detectors;
pub mod error;
pub mod evaluation;
pub mod mrf;
pub mod patchgan;
pub mod probe;
pub mod types;
pub mod viz;

pub use error::{Error, Result};
pub use types::{ImageTensor, LevelSpec, RandomSource};
