//! Sparse MIMO-OFDM channel estimation in the delay-beamspace domain.
//!
//! The channel over subcarriers × antenna rows × antenna columns is modelled as a sum of
//! atoms, each band-limited to one box of a delay / horizontal-beam / vertical-beam
//! partition. Every atom lives in a reproducing kernel Hilbert space with a modulated
//! sinc kernel, so a regularized fit reduces to a group-sparse problem over per-box
//! coefficient vectors. The crate provides:
//!
//! * [`channel_model`]: array geometry, OFDM grid, synthetic clustered multipath channels,
//!   noisy pilot measurements and the on-disk dataset container.
//! * [`kernel_factory`]: box grid, per-axis kernels, low-rank eigen-factors and the
//!   per-box modulation vectors.
//! * [`fast_operators`]: the FFT-backed synthesis operator, its adjoint and the full-grid
//!   reconstruction, together with matrix-free dense oracles.
//! * [`sparse_estimator`]: forward-backward splitting with group soft-thresholding,
//!   support extraction and debiasing.
//! * [`unfolded_estimator`]: the learned-schedule forward pass with log-penalty
//!   re-majorization, and the schedule file format.
//! * [`baselines_eval`]: LS, empirical and genie LMMSE baselines, NMSE and achievable
//!   rate, and the Monte Carlo harness.
//! * [`cli`]: JSON-configured commands behind the `rkhs-chest` binary.
//!
//! Tensors are stored flat with frequency slowest, antenna row in the middle and
//! antenna column fastest everywhere in the crate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines_eval;
pub mod channel_model;
pub mod cli;
pub mod error;
pub mod fast_operators;
pub mod kernel_factory;
pub mod linalg;
pub mod sparse_estimator;
pub mod unfolded_estimator;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
