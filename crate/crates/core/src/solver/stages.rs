use std::sync::Arc;

use crate::error::{Error, Result};
use crate::in2set::FlopBreakdown;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::sensing::SensingSystem;
use crate::tensor::kernels::softplus_inv;
use crate::tensor::{Tape, Tensor, Var};

/// Starting penalty `mu` and denoiser level `sigma` produced by a fresh model.
pub const INIT_MU: f64 = 0.5;
pub const INIT_SIGMA: f64 = 0.1;
const HIDDEN: usize = 16;

/// Per-stage penalty weights and denoiser noise levels.
#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl StageParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(Error::Config(format!(
                "{} penalties for {} noise levels",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.iter().chain(&sigma).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Numeric("stage parameters must be positive and finite".into()));
        }
        Ok(Self { mu, sigma })
    }

    pub fn stages(&self) -> usize {
        self.mu.len()
    }

    /// Prior weight `eta = sigma^2 * mu` implied by each stage.
    pub fn eta(&self) -> Vec<f64> {
        self.mu.iter().zip(&self.sigma).map(|(m, s)| s * s * m).collect()
    }
}

/// Produces the starting cube and per-stage `(mu, sigma)`.
///
/// `x0 = conv3x3(Phi_c^T y_c) + bias`; the kernel starts as a scaled identity
/// on the centre tap that undoes the average mask and band-overlap gain.
/// `(mu, sigma) = softplus(FC(gelu(FC(mean(y_c)))))`.
#[derive(Clone, Debug)]
pub struct InitialNet {
    stages: usize,
    bands: usize,
    kernel: ParamId,
    bias: ParamId,
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

/// Tape handles produced by [`InitialNet::forward`].
pub struct InitialOutput {
    pub x0: Var,
    pub mu: Vec<Var>,
    pub sigma: Vec<Var>,
}

impl InitialNet {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, bands: usize, stages: usize) -> Result<Self> {
        if stages == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        let c = bands;
        let gain = 4.0 / (c as f64 + 1.0);
        let mut k = Tensor::zeros(&[3, 3, c, c]);
        for i in 0..c {
            k.set(&[1, 1, i, i], gain);
        }
        let mut b2 = vec![softplus_inv(INIT_MU); stages];
        b2.extend(std::iter::repeat_n(softplus_inv(INIT_SIGMA), stages));
        let b2 = Tensor::new(&[2 * stages], b2)?;
        Ok(Self {
            stages,
            bands,
            kernel: store.add(format!("{prefix}.conv.kernel"), k),
            bias: store.add(format!("{prefix}.conv.bias"), Tensor::zeros(&[c])),
            fc1: (
                store.add(format!("{prefix}.fc1.weight"), init.trunc_normal(&[1, HIDDEN], 0.02)),
                store.add(format!("{prefix}.fc1.bias"), Tensor::zeros(&[HIDDEN])),
            ),
            fc2: (
                store.add(
                    format!("{prefix}.fc2.weight"),
                    init.trunc_normal(&[HIDDEN, 2 * stages], 0.02),
                ),
                store.add(format!("{prefix}.fc2.bias"), b2),
            ),
        })
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, cassi: Var, sys: &Arc<SensingSystem>) -> Result<InitialOutput> {
        if sys.bands() != self.bands {
            return Err(Error::Dimension(format!(
                "initial net built for {} bands, system has {}",
                self.bands,
                sys.bands()
            )));
        }
        let adj = tape.apply_linear(cassi, sys.cassi_operator(), true)?;
        let x0 = tape.conv2d(adj, p[self.kernel], 1, 1)?;
        let x0 = tape.add_broadcast(x0, p[self.bias])?;

        let m = tape.mean(cassi)?;
        let m = tape.reshape(m, &[1, 1])?;
        let h = tape.linear(m, p[self.fc1.0])?;
        let h = tape.add_broadcast(h, p[self.fc1.1])?;
        let h = tape.gelu(h)?;
        let o = tape.linear(h, p[self.fc2.0])?;
        let o = tape.add_broadcast(o, p[self.fc2.1])?;
        let o = tape.softplus(o)?;
        let mut pick = |i| -> Result<Var> {
            let v = tape.narrow_lastdim(o, i, 1)?;
            tape.reshape(v, &[1])
        };
        let mu = (0..self.stages).map(&mut pick).collect::<Result<Vec<_>>>()?;
        let sigma = (self.stages..2 * self.stages)
            .map(&mut pick)
            .collect::<Result<Vec<_>>>()?;
        Ok(InitialOutput { x0, mu, sigma })
    }

    /// Multiply-accumulates of one forward pass.
    pub fn flops(&self, sys: &SensingSystem) -> FlopBreakdown {
        let (h, w, c) = (sys.height(), sys.width(), sys.bands());
        FlopBreakdown {
            operator: sys.scene_len() as u64,
            conv: (h * w * 9 * c * c) as u64,
            linear: (HIDDEN + HIDDEN * 2 * self.stages) as u64,
            ..Default::default()
        }
    }
}
