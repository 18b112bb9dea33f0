//! A small CPU neural-network engine used by the anomaly-detection pipeline.
//!
//! Everything is `f64` and deterministic given a seeded RNG. Layers carry
//! hand-written backward passes; networks are sequences of [`net::Op`]s with
//! skip-connection bookkeeping, which covers the encoder-decoder generators,
//! patch discriminators, statistics networks, and patch detectors built on
//! top of this crate.
//!
//! Design constraints that matter to callers:
//! - Valid (zero-padding-free) convolutions are exact: an output cell depends
//!   on precisely its receptive-field window, bit-for-bit.
//! - `forward_eval` is a pure function of the input and the stored state.
//! - Checkpoints round-trip parameters bit-for-bit (raw little-endian f64).

pub mod adam;
pub mod checkpoint;
pub mod init;
pub mod layers;
pub mod net;
pub mod ops;
pub mod param;

pub use adam::Adam;
pub use init::Init;
pub use layers::{Activation, BatchNorm2d, Conv2d, Dense, SpectralNorm};
pub use net::{Net, Op, Tape};
pub use param::Param;

/// The 4-D tensor type all layers operate on: `(batch, channels, height, width)`.
pub type T4 = ndarray::Array4<f64>;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
