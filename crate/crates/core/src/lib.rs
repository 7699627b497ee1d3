//! One-block latent-bottleneck transformer (1BT) for EEG workload
//! classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] dense tensors and a reverse-mode tape,
//! * [`model`] Fourier token construction, cross/self attention blocks and the
//!   classification head,
//! * [`cost`] closed-form parameter and FLOP accounting,
//! * [`train`] AdamW, cosine schedule and the mini-batch loop,
//! * [`data`] the sample container, on-disk format, synthetic generator and
//!   leave-one-subject-out splits,
//! * [`metrics`] confusion-matrix metrics and table aggregation,
//! * [`eval`] the LOSO harness tying the pieces together.

mod binio;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, OneBt};
pub use tensor::{Real, Tape, Tensor, Var};
