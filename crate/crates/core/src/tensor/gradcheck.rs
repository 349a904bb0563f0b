use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::par;

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} tol={:.0e} coords={} worst=input{}[{}] analytic={:.6e} numeric={:.6e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tol,
            self.checked,
            self.worst.0,
            self.worst.1,
            self.worst_analytic,
            self.worst_numeric
        )
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Gradients smaller than this are compared in absolute rather than
    /// relative terms.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: Option<usize>,
    /// Seed for the random projection that turns non-scalar outputs into a loss.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_coords: None,
            seed: 0x5eed,
        }
    }
}

/// Checks `f` at `input` with step `h` and relative tolerance `tol`.
pub fn grad_check<F>(f: F, input: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Sync,
{
    let opts = GradCheckOptions {
        h,
        tol,
        ..Default::default()
    };
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(input), &opts)
}

/// Multi-input variant: `f` receives one leaf per entry of `inputs`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    // fixed projection weights, generated lazily once the output size is known
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let weights = Tensor::from_fn(tape.shape(out), |_| rng.random_range(-1.0..1.0));
    if !tape.value(out).is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let loss = project(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let evaluate = |k: usize, j: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == k {
                    let mut t = t.clone();
                    t.data_mut()[j] += delta;
                    tape.leaf(t)
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        let out = f(&mut tape, &vars)?;
        let v = if is_scalar(tape.value(out)) {
            tape.value(out).item()
        } else {
            tape.value(out).dot(&weights)
        };
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "function value not finite at input {k} coordinate {j}"
            )));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        tol: opts.tol,
        passed: true,
    };
    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*var).unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let numeric = par::map_range(coords.len(), |c| -> Result<f64> {
            let j = coords[c];
            let plus = evaluate(k, j, opts.h)?;
            let minus = evaluate(k, j, -opts.h)?;
            Ok((plus - minus) / (2.0 * opts.h))
        });
        for (c, num) in numeric.into_iter().enumerate() {
            let num = num?;
            let j = coords[c];
            let a = analytic.data()[j];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(opts.floor);
            report.checked += 1;
            if report.checked == 1 || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (k, j);
                report.worst_analytic = a;
                report.worst_numeric = num;
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}

fn is_scalar(t: &Tensor) -> bool {
    t.shape().is_empty()
}

fn project(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    if is_scalar(tape.value(out)) {
        return Ok(out);
    }
    let w = tape.constant(weights.clone());
    tape.dot(out, w)
}
