//! Vision-LSTM (ViL) engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autograd`], [`optim`]: a small dense tensor with a
//!   tape-based reverse-mode differentiator and the AdamW optimizer.
//! - [`mlstm`]: the mLSTM sequence kernel in recurrent, chunkwise and
//!   parallel form, plus differentiable graph versions of each mode.
//! - [`traversal`]: grid scan orders and per-block direction schedules.
//! - [`model`]: the ViL backbone (patch embedding, alternating mLSTM blocks,
//!   pooling, head) and its checkpoint format.
//! - [`flops`]: analytic operation counts.
//! - [`train`], [`verify`], [`bench`], [`ablate`]: the harness behind the
//!   `vil` command-line tool.
//!
//! Batch-level work (per-sample graphs, Monte-Carlo trials, equivalence
//! sweeps) is dispatched through [`par`], which uses rayon when the
//! `parallel` feature is enabled and falls back to a sequential loop
//! otherwise.

pub mod ablate;
pub mod autograd;
pub mod bench;
pub mod config;
pub mod dataset;
mod error;
pub mod flops;
pub mod mlstm;
pub mod model;
pub mod optim;
pub mod par;
mod real;
pub mod tensor;
pub mod train;
pub mod traversal;
pub mod verify;

pub use error::{Result, VilError};
pub use real::Real;
