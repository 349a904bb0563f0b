//! Half-quadratic-splitting reconstruction unrolled into a trainable network.
//!
//! Each stage solves the data subproblem `min_x ||y - Phi x||^2 + mu ||z - x||^2`
//! with a few conjugate-gradient iterations warm-started at `z`, then applies
//! the PAN-guided denoiser at noise level `sigma`. `mu` and `sigma` per stage
//! come from the initialization network.

mod cg;
mod pipeline;
mod stages;
mod train;

pub use cg::{cg_solve, cg_solve_observed, cg_solve_tape, CgConfig, CgOutcome};
pub use pipeline::{data_objective, data_step, data_step_tape, normal_apply, Model, PipelineOutput, Reconstruction};
pub use stages::{InitialNet, InitialOutput, StageParams, INIT_MU, INIT_SIGMA};
pub use train::{dataset_loss, l1_loss, train, Adam, Sample, TrainConfig, TrainReport};
