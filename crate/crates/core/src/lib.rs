//! Efficient attention augmented convolutional networks on a small,
//! self-contained reverse-mode autodiff engine.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] / [`autograd`]: dense `f32`/`f64` tensors, a tape, and the
//!   differentiable operations the models need, plus a byte-exact live
//!   allocation tracker.
//! * [`attention`]: patch embedding and the full, Linformer and 2-D
//!   Longformer multi-head attention kernels wrapped in a pre-norm block.
//! * [`backbone`]: ResNet18 layers with concatenation or replacement
//!   augmentation, built from a declarative [`backbone::ModelSpec`].
//! * [`data`], [`train`], [`bench`]: CIFAR-10 ingestion, SGD training with
//!   per-epoch metrics, and the peak-memory / latency benchmarks.
//! * [`config`], [`weights`], [`cli`]: the run-config format, weight files and
//!   the command-line front end.
//! * [`selftest`]: gradient checks and attention equivalence checks shipped
//!   with the binary.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod init;
pub mod report;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
