use std::sync::Arc;

use super::cg::{cg_solve, cg_solve_tape, CgConfig};
use super::stages::{InitialNet, StageParams};
use crate::error::{Error, Result};
use crate::in2set::{ArchConfig, Denoiser, FlopBreakdown, Gfe, GuidedPyramid};
use crate::params::{Bound, Init, ParamStore};
use crate::sensing::{MeasurementPair, SensingSystem};
use crate::tensor::{Tape, Tensor, Var};

/// `(Phi^T Phi + mu I) x = Phi^T y + mu z`, solved by CG warm-started at `z`.
pub fn data_step(y: &MeasurementPair, z: &Tensor, mu: f64, sys: &SensingSystem, cfg: &CgConfig) -> Result<Tensor> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("data step needs mu > 0, got {mu}")));
    }
    let aty = sys.phi_adjoint(&y.stacked())?;
    if z.shape() != aty.shape() {
        return Err(Error::Dimension(format!(
            "data step: z {:?} vs scene {:?}",
            z.shape(),
            aty.shape()
        )));
    }
    let b: Vec<f64> = aty.data().iter().zip(z.data()).map(|(a, z)| a + mu * z).collect();
    let apply = |v: &[f64]| normal_apply(sys, v, mu);
    let out = cg_solve(apply, &b, z.data(), cfg)?;
    Tensor::new(z.shape(), out.x)
}

/// `(Phi^T Phi + mu I) v`.
pub fn normal_apply(sys: &SensingSystem, v: &[f64], mu: f64) -> Vec<f64> {
    let x = Tensor::new(&sys.cube_shape(), v.to_vec()).expect("scene length");
    let back = sys
        .phi_adjoint(&sys.phi_apply(&x).expect("scene length"))
        .expect("measurement length");
    back.into_data().into_iter().zip(v).map(|(a, v)| a + mu * v).collect()
}

/// `||y - Phi x||^2 + mu ||z - x||^2`.
pub fn data_objective(y: &MeasurementPair, x: &Tensor, z: &Tensor, mu: f64, sys: &SensingSystem) -> Result<f64> {
    let r = sys.phi_apply(x)?;
    let fit: f64 = r
        .data()
        .iter()
        .zip(y.stacked().data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    let prox: f64 = x.data().iter().zip(z.data()).map(|(a, b)| (b - a) * (b - a)).sum();
    Ok(fit + mu * prox)
}

/// Tape version of [`data_step`]; `aty` is `Phi^T y`, `mu` a one-element var.
pub fn data_step_tape(
    tape: &mut Tape,
    sys: &Arc<SensingSystem>,
    aty: Var,
    z: Var,
    mu: Var,
    cfg: &CgConfig,
) -> Result<Var> {
    let op = sys.operator();
    let muz = tape.scale_by(z, mu)?;
    let b = tape.add(aty, muz)?;
    let apply = |t: &mut Tape, v: Var| -> Result<Var> {
        let f = t.apply_linear(v, op.clone(), false)?;
        let back = t.apply_linear(f, op.clone(), true)?;
        let reg = t.scale_by(v, mu)?;
        t.add(back, reg)
    };
    cg_solve_tape(tape, apply, b, z, cfg)
}

/// Tape handles of one unrolled reconstruction.
pub struct PipelineOutput {
    pub x0: Var,
    pub mu: Vec<Var>,
    pub sigma: Vec<Var>,
    /// Data-step output of each stage.
    pub x: Vec<Var>,
    /// Denoiser output of each stage; the last entry is the reconstruction.
    pub z: Vec<Var>,
}

impl PipelineOutput {
    pub fn output(&self) -> Var {
        *self.z.last().expect("at least one stage")
    }
}

/// Values of one reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub x0: Tensor,
    pub cube: Tensor,
    pub params: StageParams,
}

/// The full unrolled network: InitialNet, a shared GFE and one denoiser per
/// stage.
#[derive(Clone, Debug)]
pub struct Model {
    arch: ArchConfig,
    stages: usize,
    store: ParamStore,
    initial: InitialNet,
    gfe: Gfe,
    denoisers: Vec<Denoiser>,
}

impl Model {
    pub fn new(arch: &ArchConfig, stages: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let initial = InitialNet::new(&mut store, &mut init, "init", arch.bands, stages)?;
        let gfe = Gfe::new(&mut store, &mut init, "gfe", arch);
        let denoisers = (0..stages)
            .map(|k| Denoiser::new(&mut store, &mut init, &format!("stage{k}"), arch))
            .collect::<Result<_>>()?;
        Ok(Self {
            arch: arch.clone(),
            stages,
            store,
            initial,
            gfe,
            denoisers,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn denoisers(&self) -> &[Denoiser] {
        &self.denoisers
    }

    /// Zeroes every denoiser's output kernel so each prior step is the identity.
    pub fn make_denoisers_identity(&mut self) {
        for d in &self.denoisers {
            self.store.get_mut(d.output_kernel()).data_mut().fill(0.0);
        }
    }

    fn check_system(&self, sys: &SensingSystem) -> Result<()> {
        let a = &self.arch;
        if sys.cube_shape() != [a.height, a.width, a.bands] {
            return Err(Error::Dimension(format!(
                "model built for {}x{}x{}, sensing system is {:?}",
                a.height,
                a.width,
                a.bands,
                sys.cube_shape()
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        y: &MeasurementPair,
        sys: &Arc<SensingSystem>,
        cfg: &CgConfig,
    ) -> Result<PipelineOutput> {
        self.check_system(sys)?;
        let cassi = tape.constant(y.cassi.clone());
        let pan = tape.constant(y.pan.clone());
        let init = self.initial.forward(tape, p, cassi, sys)?;
        let guide: GuidedPyramid = self.gfe.forward(tape, p, pan)?;
        let stacked = tape.constant(y.stacked());
        let aty = tape.apply_linear(stacked, sys.operator(), true)?;
        let mut z = init.x0;
        let (mut xs, mut zs) = (Vec::new(), Vec::new());
        for (k, den) in self.denoisers.iter().enumerate() {
            let x = data_step_tape(tape, sys, aty, z, init.mu[k], cfg)?;
            z = den.forward(tape, p, x, init.sigma[k], &guide)?;
            xs.push(x);
            zs.push(z);
        }
        Ok(PipelineOutput {
            x0: init.x0,
            mu: init.mu,
            sigma: init.sigma,
            x: xs,
            z: zs,
        })
    }

    /// Gradient-free reconstruction.
    pub fn reconstruct(&self, y: &MeasurementPair, sys: &Arc<SensingSystem>, cfg: &CgConfig) -> Result<Reconstruction> {
        let mut tape = Tape::inference();
        let p = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &p, y, sys, cfg)?;
        let cube = tape.value(out.output()).clone();
        if !cube.is_finite() {
            return Err(Error::Numeric("reconstruction is not finite".into()));
        }
        let item = |v: &Var| tape.value(*v).item();
        Ok(Reconstruction {
            x0: tape.value(out.x0).clone(),
            cube,
            params: StageParams::new(out.mu.iter().map(item).collect(), out.sigma.iter().map(item).collect())?,
        })
    }

    /// Multiply-accumulates of one reconstruction with `cfg.max_iters` CG
    /// iterations per stage (no early stop).
    pub fn flops(&self, sys: &SensingSystem, cfg: &CgConfig) -> FlopBreakdown {
        let n = sys.scene_len() as u64;
        let mut f = self.gfe.flops() + self.initial.flops(sys);
        f.operator += 2 * n;
        // one operator pair for the initial residual, one per iteration
        let cg = FlopBreakdown {
            operator: 4 * n * (cfg.max_iters as u64 + 1),
            ..Default::default()
        };
        for d in &self.denoisers {
            f += cg + d.flops();
        }
        f
    }
}
