use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cg::CgConfig;
use super::pipeline::Model;
use crate::error::{Error, Result};
use crate::par;
use crate::params::ParamStore;
use crate::sensing::{MeasurementPair, NoiseModel, SensingSystem};
use crate::tensor::{Tape, Tensor, Var};

/// Ground truth with its simulated measurements.
#[derive(Clone, Debug)]
pub struct Sample {
    pub truth: Tensor,
    pub measurement: MeasurementPair,
}

impl Sample {
    pub fn simulate(truth: Tensor, sys: &SensingSystem, noise: &NoiseModel) -> Result<Self> {
        let measurement = sys.simulate(&truth, noise)?;
        Ok(Self { truth, measurement })
    }
}

fn default_batch() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Peak learning rate, cosine-annealed to `min_lr` over `steps`.
    pub lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Global gradient-norm clip.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps.max(1) as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * t).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }
}

/// Mean absolute error between `out` and a fixed target.
pub fn l1_loss(tape: &mut Tape, out: Var, truth: &Tensor) -> Result<Var> {
    let t = tape.constant(truth.clone());
    let d = tape.sub(out, t)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Adaptive-moment optimizer over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.values().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let w = store.get_mut(id).data_mut();
            for (j, (wj, &g)) in w.iter_mut().zip(&grads[i]).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *wj -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean batch L1 loss before each update.
    pub loss_trace: Vec<f64>,
    pub lr_trace: Vec<f64>,
}

/// Loss and gradients of one sample.
fn sample_grads(model: &Model, s: &Sample, sys: &Arc<SensingSystem>, cg: &CgConfig) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let out = model.forward(&mut tape, &p, &s.measurement, sys, cg)?;
    let loss = l1_loss(&mut tape, out.output(), &s.truth)?;
    let lv = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    Ok((lv, model.params().collect_grads(&p, &mut grads)))
}

/// Mean L1 reconstruction error over `samples`.
pub fn dataset_loss(model: &Model, samples: &[Sample], sys: &Arc<SensingSystem>, cg: &CgConfig) -> Result<f64> {
    let losses = par::map_range(samples.len(), |i| -> Result<f64> {
        let r = model.reconstruct(&samples[i].measurement, sys, cg)?;
        let n = r.cube.numel() as f64;
        Ok(r.cube
            .data()
            .iter()
            .zip(samples[i].truth.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Minimizes mean L1 loss with Adam. Sample `i` of step `s` is
/// `(s * batch + i) mod len`; per-sample gradients are summed in batch order.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    sys: &Arc<SensingSystem>,
    cg: &CgConfig,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut opt = Adam::new(model.params());
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|i| (step * cfg.batch_size + i) % samples.len())
            .collect();
        let results = par::map_range(idx.len(), |j| sample_grads(model, &samples[idx[j]], sys, cg));
        let mut loss = 0.0;
        let mut total: Option<Vec<Vec<f64>>> = None;
        for (j, r) in results.into_iter().enumerate() {
            let (l, g) = r?;
            if !l.is_finite() || g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient at step {step} (sample {})",
                    idx[j]
                )));
            }
            loss += l;
            match &mut total {
                None => total = Some(g),
                Some(t) => {
                    for (a, b) in t.iter_mut().flatten().zip(g.iter().flatten()) {
                        *a += b;
                    }
                }
            }
        }
        let n = idx.len() as f64;
        let mut grads = total.expect("non-empty batch");
        let mut norm = 0.0;
        for v in grads.iter_mut().flatten() {
            *v /= n;
            norm += *v * *v;
        }
        if let Some(clip) = cfg.grad_clip {
            let norm = norm.sqrt();
            if norm > clip {
                grads.iter_mut().flatten().for_each(|v| *v *= clip / norm);
            }
        }
        let lr = cfg.lr_at(step);
        opt.step(model.params_mut(), &grads, lr);
        report.loss_trace.push(loss / n);
        report.lr_trace.push(lr);
        on_step(step, loss / n);
    }
    Ok(report)
}
