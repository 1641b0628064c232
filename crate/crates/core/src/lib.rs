//! Time-domain audio source separation on a learned filterbank.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] — dense tensors plus a single-use reverse-mode tape covering
//!   exactly the operations the separator needs (1-D convolutions, PReLU,
//!   sigmoid/softmax, global and cumulative layer norm, and the scalar
//!   arithmetic the loss is built from). Storage is `f32` in production;
//!   every kernel accumulates in `f64`, and the whole stack is generic over
//!   the element type so gradient checks can run at full `f64` precision.
//! * [`model`] — the separator itself: an overcomplete 1-D conv encoder,
//!   a dilated temporal convolutional mask estimator with residual and skip
//!   connections, and a transposed-conv decoder.
//! * [`train`] — scale-invariant SNR, permutation-invariant loss, Adam with
//!   global-norm gradient clipping, and the epoch loop with validation-driven
//!   learning-rate halving.
//! * [`stream`] — stateful frame-by-frame causal inference with fixed
//!   per-frame cost, plus a time-per-frame benchmark.
//! * [`signal`] — WAV I/O, mixture synthesis, STFT analysis, ideal-mask
//!   oracles, evaluation metrics and reports, and filterbank basis export.
//!
//! Determinism: every entry point that draws randomness takes an explicit
//! seed, and all reductions run in a fixed order, so runs with equal inputs
//! are bit-identical. `set_threads` caps intra-op parallelism; the default
//! of one thread is also the reference order (parallel splits preserve it).

pub mod model;
pub mod signal;
pub mod stream;
pub mod tensor;
pub mod train;

mod error;
mod threads;

pub use error::Error;
pub use threads::{set_threads, threads};

pub type Result<T> = std::result::Result<T, Error>;
