//! Dual-camera compressive hyperspectral imaging (DCCHI).
//!
//! * [`sensing`]: the CASSI + panchromatic forward model as matrix-free operators.
//! * [`solver`]: conjugate gradient and the half-quadratic-splitting unrolled
//!   reconstruction pipeline, plus training.
//! * [`in2set`]: the PAN-guided transformer denoiser used as the learned prior.
//! * [`metrics`]: PSNR/SSIM and the PAN-vs-HSI correlation-map study.
//! * [`io`]: tensor files, checkpoints and run configuration.
//! * [`tensor`]: dense tensors with a reverse-mode tape.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod in2set;
pub mod io;
pub mod metrics;
pub mod par;
pub mod params;
pub mod sensing;
pub mod solver;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
