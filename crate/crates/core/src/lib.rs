//! Complex-field trainable iterative shrinkage (C-TISTA).
//!
//! The crate recovers `x` from observations `y = f(Ax) + w` where `A` is a
//! complex matrix, `f` a component-wise (possibly non-analytic) map and `w`
//! circular Gaussian noise. Each layer of the unrolled recursion takes a
//! Wirtinger gradient step, shrinks the result towards the prior and
//! re-estimates the error variance from the observation residual. The three
//! scalars per layer are trained by incremental mini-batch training.
//!
//! Module map:
//!
//! * [`numerics`]: complex matrices, pseudo-inverse, IDFT, real widening, RNG streams
//! * [`nonlinearity`]: component-wise maps with Wirtinger derivatives, LMS gradient
//! * [`shrinkage`]: soft thresholding, constellation MMSE shrinkage, hard decisions
//! * [`recovery`]: the unrolled recursion and the zero-forcing detector
//! * [`baselines`]: real-valued AMP on the widened system, DFT receiver
//! * [`scenarios`]: experiment generators, SNR/PAPR calibration, metrics
//! * [`training`]: loss, gradients, Adam, incremental training, parameter files
//! * [`cli`]: the experiment runner behind the `ctista` binary

// Range checks are written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
mod error;
pub mod nonlinearity;
pub mod numerics;
pub mod recovery;
pub mod scenarios;
pub mod selftest;
pub mod shrinkage;
pub mod training;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
