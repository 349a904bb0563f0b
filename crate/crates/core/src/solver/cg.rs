use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::dot;
use crate::tensor::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgConfig {
    pub max_iters: usize,
    #[serde(default)]
    pub residual_tol: f64,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self::preset(5)
    }
}

impl CgConfig {
    /// The iteration presets compared in the CG trade-off study.
    pub const PRESETS: [usize; 4] = [1, 2, 5, 10];

    /// Fixed iteration count with no early stop.
    pub fn preset(iters: usize) -> Self {
        Self {
            max_iters: iters,
            residual_tol: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.residual_tol >= 0.0) {
            return Err(Error::Config(format!(
                "CG needs max_iters >= 1 and residual_tol >= 0, got {} / {}",
                self.max_iters, self.residual_tol
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
}

/// Conjugate gradient for an SPD operator `apply_a`, starting from `x0`.
pub fn cg_solve(apply_a: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], x0: &[f64], cfg: &CgConfig) -> Result<CgOutcome> {
    cg_solve_observed(apply_a, b, x0, cfg, |_, _| {})
}

/// As [`cg_solve`], calling `observe(k, x_k)` after every iteration.
pub fn cg_solve_observed(
    apply_a: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: &[f64],
    cfg: &CgConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<CgOutcome> {
    cfg.validate()?;
    if b.len() != x0.len() {
        return Err(Error::Dimension(format!(
            "cg: rhs of length {} with start of length {}",
            b.len(),
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let ax = apply_a(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rs = dot(&r, &r);
    let mut iterations = 0;
    while iterations < cfg.max_iters && !converged(rs, cfg) {
        let ap = apply_a(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(Error::Numeric(format!(
                "cg: curvature p'Ap = {pap:e} at iteration {iterations}; operator is not SPD"
            )));
        }
        let alpha = rs / pap;
        for ((xi, ri), (pi, api)) in x.iter_mut().zip(r.iter_mut()).zip(p.iter().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        let rs_new = dot(&r, &r);
        if !rs_new.is_finite() {
            return Err(Error::Numeric(format!(
                "cg: residual diverged at iteration {iterations}"
            )));
        }
        let beta = rs_new / rs;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs = rs_new;
        iterations += 1;
        observe(iterations, &x);
    }
    Ok(CgOutcome {
        x,
        iterations,
        residual_norm: rs.sqrt(),
    })
}

/// Stops at the tolerance, or once `r'r` leaves the normal range: past
/// that point `p'Ap` can underflow to zero for an SPD operator.
fn converged(rs: f64, cfg: &CgConfig) -> bool {
    rs.sqrt() <= cfg.residual_tol || rs < f64::MIN_POSITIVE
}

/// CG recorded on a tape so gradients flow through every iteration into
/// `b`, `x0` and whatever `apply_a` closes over.
pub fn cg_solve_tape(
    tape: &mut Tape,
    mut apply_a: impl FnMut(&mut Tape, Var) -> Result<Var>,
    b: Var,
    x0: Var,
    cfg: &CgConfig,
) -> Result<Var> {
    cfg.validate()?;
    let mut x = x0;
    let ax = apply_a(tape, x)?;
    let mut r = tape.sub(b, ax)?;
    let mut p = r;
    let mut rs = tape.dot(r, r)?;
    for it in 0..cfg.max_iters {
        if converged(tape.value(rs).item(), cfg) {
            break;
        }
        let ap = apply_a(tape, p)?;
        let pap = tape.dot(p, ap)?;
        let pv = tape.value(pap).item();
        if !(pv > 0.0) || !pv.is_finite() {
            return Err(Error::Numeric(format!(
                "cg: curvature p'Ap = {pv:e} at iteration {it}; operator is not SPD"
            )));
        }
        let alpha = tape.div(rs, pap)?;
        let step = tape.scale_by(p, alpha)?;
        x = tape.add(x, step)?;
        if it + 1 == cfg.max_iters {
            break;
        }
        let astep = tape.scale_by(ap, alpha)?;
        r = tape.sub(r, astep)?;
        let rs_new = tape.dot(r, r)?;
        if !tape.value(rs_new).item().is_finite() {
            return Err(Error::Numeric(format!("cg: residual diverged at iteration {it}")));
        }
        let beta = tape.div(rs_new, rs)?;
        let bp = tape.scale_by(p, beta)?;
        p = tape.add(r, bp)?;
        rs = rs_new;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_converges_in_one_step() {
        let b = [1.0, -2.0, 3.0];
        let out = cg_solve(|v| v.to_vec(), &b, &[0.0; 3], &CgConfig::preset(1)).unwrap();
        assert_eq!(out.x, b.to_vec());
    }

    #[test]
    fn first_iterate_is_steepest_descent() {
        let a = |v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, x)| (i + 1) as f64 * x)
                .collect::<Vec<_>>()
        };
        let b = [1.0, 1.0, -0.5, 2.0];
        let out = cg_solve(a, &b, &[0.0; 4], &CgConfig::preset(1)).unwrap();
        let alpha = dot(&b, &b) / dot(&b, &a(&b));
        for (x, bi) in out.x.iter().zip(b) {
            assert!((x - alpha * bi).abs() < 1e-15);
        }
    }

    #[test]
    fn tape_and_plain_agree() {
        let a = |v: &[f64]| {
            v.iter()
                .enumerate()
                .map(|(i, x)| (i + 2) as f64 * x)
                .collect::<Vec<_>>()
        };
        let b = vec![0.3, -1.0, 2.0, 0.7, 1.1];
        let plain = cg_solve(a, &b, &[0.1; 5], &CgConfig::preset(3)).unwrap();
        let mut tape = Tape::new();
        let bv = tape.constant(crate::Tensor::new(&[5], b).unwrap());
        let x0 = tape.constant(crate::Tensor::full(&[5], 0.1));
        let d = tape.constant(crate::Tensor::from_fn(&[5], |i| (i + 2) as f64));
        let x = cg_solve_tape(&mut tape, |t, v| t.mul(v, d), bv, x0, &CgConfig::preset(3)).unwrap();
        for (p, q) in plain.x.iter().zip(tape.value(x).data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_convergence_before_max_iters_is_not_an_error() {
        let out = cg_solve(
            |v| v.iter().map(|x| 2.0 * x).collect(),
            &[1.0, 1.0],
            &[0.0; 2],
            &CgConfig::preset(5),
        )
        .unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.x, vec![0.5, 0.5]);
    }

    #[test]
    fn indefinite_operator_is_a_numeric_error() {
        let r = cg_solve(
            |v| v.iter().map(|x| -x).collect(),
            &[1.0, 2.0],
            &[0.0; 2],
            &CgConfig::preset(2),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
