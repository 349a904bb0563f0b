//! Desk-scale studies driven by the CLI and the acceptance suite: gradient
//! checks, the CG-iteration and break-down ablations, and the correlation
//! proxy over synthetic scenes.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::in2set::{ArchConfig, Denoiser, Gfe, Toggles};
use crate::metrics::{proxy_compare, psnr, CorrProxyReport, CorrelationConfig, QualityReport};
use crate::params::{Init, ParamStore};
use crate::sensing::{NoiseModel, SensingSystem};
use crate::solver::{
    data_objective, data_step, dataset_loss, train, CgConfig, Model, Sample, TrainConfig, TrainReport,
};
use crate::synth::blob_scene;
use crate::tensor::{grad_check_many, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Replaces every parameter with `O(1/sqrt(fan_in))` noise (layer-norm gains
/// stay at 1) so no branch of a freshly initialized network is inert.
pub fn randomize_params(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let gain = store.name(id).ends_with("gain");
        let t = store.get(id);
        let fan = t.shape().iter().rev().skip(1).product::<usize>().max(1) as f64;
        let s = 1.0 / fan.sqrt();
        let v = if gain {
            Tensor::ones(t.shape())
        } else {
            uniform(t.shape(), &mut rng, -s, s)
        };
        *store.get_mut(id) = v;
    }
}

/// One named finite-difference check.
#[derive(Clone, Debug)]
pub struct CheckRow {
    pub name: String,
    pub report: GradCheckReport,
}

type Primitive = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + Sync>;

/// Checks every differentiable tape operation at tolerance `tol` on seeded
/// random inputs.
pub fn primitive_gradchecks(seed: u64, tol: f64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |shape: &[usize]| uniform(shape, &mut rng, -1.0, 1.0);
    let away_from_zero = |t: Tensor| t.map(|v| v.signum() * (0.2 + v.abs()));
    let sys = Arc::new(SensingSystem::simulation(6, 6, 3, seed));
    let (phi, phi_c) = (sys.operator(), sys.cassi_operator());
    let gather_index: Arc<[usize]> = (0..12).rev().chain([0, 5, 5]).collect();

    let cases: Vec<(&str, Vec<Tensor>, Primitive)> = vec![
        ("add", vec![u(&[3, 4]), u(&[3, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![u(&[3, 4]), u(&[3, 4])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![u(&[3, 4]), u(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "div",
            vec![u(&[3, 4]), u(&[3, 4]).map(|v| 1.0 + 0.5 * v)],
            Box::new(|t, v| t.div(v[0], v[1])),
        ),
        (
            "add_broadcast",
            vec![u(&[2, 3, 4]), u(&[3, 4])],
            Box::new(|t, v| t.add_broadcast(v[0], v[1])),
        ),
        (
            "scale_by",
            vec![u(&[3, 4]), u(&[1])],
            Box::new(|t, v| t.scale_by(v[0], v[1])),
        ),
        ("scale", vec![u(&[3, 4])], Box::new(|t, v| t.scale(v[0], -1.7))),
        (
            "mul_lastdim",
            vec![u(&[2, 3, 4]), u(&[2, 3, 1])],
            Box::new(|t, v| t.mul_lastdim(v[0], v[1])),
        ),
        (
            "matmul",
            vec![u(&[3, 4]), u(&[4, 2])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "matmul_batched",
            vec![u(&[2, 3, 4]), u(&[2, 4, 5])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "matmul_shared",
            vec![u(&[3, 4]), u(&[2, 4, 5])],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "softmax_lastdim",
            vec![u(&[3, 5]).map(|v| 3.0 * v)],
            Box::new(|t, v| t.softmax_lastdim(v[0])),
        ),
        (
            "layer_norm",
            vec![u(&[4, 6]), u(&[6]), u(&[6])],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        (
            "conv2d_s1",
            vec![u(&[5, 6, 2]), u(&[3, 3, 2, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1)),
        ),
        (
            "conv2d_s2",
            vec![u(&[6, 6, 2]), u(&[3, 3, 2, 3])],
            Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1)),
        ),
        (
            "conv2d_1x1",
            vec![u(&[4, 4, 3]), u(&[1, 1, 3, 2])],
            Box::new(|t, v| t.conv2d(v[0], v[1], 1, 0)),
        ),
        (
            "conv_transpose2d",
            vec![u(&[3, 4, 2]), u(&[2, 2, 2, 3])],
            Box::new(|t, v| t.conv_transpose2d(v[0], v[1], 2)),
        ),
        (
            "cosine_lastdim",
            vec![u(&[4, 5]), u(&[4, 5])],
            Box::new(|t, v| t.cosine_lastdim(v[0], v[1])),
        ),
        ("gelu", vec![u(&[3, 4]).map(|v| 3.0 * v)], Box::new(|t, v| t.gelu(v[0]))),
        (
            "softplus",
            vec![u(&[3, 4]).map(|v| 3.0 * v)],
            Box::new(|t, v| t.softplus(v[0])),
        ),
        ("abs", vec![away_from_zero(u(&[3, 4]))], Box::new(|t, v| t.abs(v[0]))),
        ("reshape", vec![u(&[3, 4])], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        (
            "gather",
            vec![u(&[3, 4])],
            Box::new(move |t, v| t.gather(v[0], gather_index.clone(), &[3, 5])),
        ),
        (
            "permute",
            vec![u(&[2, 3, 4])],
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
        ),
        ("transpose", vec![u(&[2, 3, 4])], Box::new(|t, v| t.transpose(v[0]))),
        (
            "concat_lastdim",
            vec![u(&[3, 2]), u(&[3, 4])],
            Box::new(|t, v| t.concat_lastdim(v[0], v[1])),
        ),
        (
            "narrow_lastdim",
            vec![u(&[3, 6])],
            Box::new(|t, v| t.narrow_lastdim(v[0], 1, 3)),
        ),
        ("sum", vec![u(&[3, 4])], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![u(&[3, 4])], Box::new(|t, v| t.mean(v[0]))),
        ("dot", vec![u(&[3, 4]), u(&[3, 4])], Box::new(|t, v| t.dot(v[0], v[1]))),
        (
            "linear",
            vec![u(&[2, 3, 4]), u(&[4, 5])],
            Box::new(|t, v| t.linear(v[0], v[1])),
        ),
        (
            "apply_linear_phi",
            vec![u(&[6, 6, 3])],
            Box::new({
                let op = phi.clone();
                move |t, v| t.apply_linear(v[0], op.clone(), false)
            }),
        ),
        (
            "apply_linear_phi_adjoint",
            vec![u(&[sys.measurement_len()])],
            Box::new({
                let op = phi.clone();
                move |t, v| t.apply_linear(v[0], op.clone(), true)
            }),
        ),
        (
            "apply_linear_cassi",
            vec![u(&[6, 6, 3])],
            Box::new(move |t, v| t.apply_linear(v[0], phi_c.clone(), false)),
        ),
    ];
    let opts = GradCheckOptions {
        tol,
        seed,
        ..Default::default()
    };
    cases
        .into_iter()
        .map(|(name, inputs, f)| {
            Ok(CheckRow {
                name: name.to_owned(),
                report: grad_check_many(|t, v| f(t, v), &inputs, &opts)?,
            })
        })
        .collect()
}

/// Arch of the toy network used for the full-model checks.
pub fn toy_arch() -> ArchConfig {
    ArchConfig::new(16, 16, 4).with_window(4)
}

/// Finite-difference checks of the whole In2SET denoiser (GFE included) at
/// 16x16x4, and of the one-stage unrolled pipeline. Input gradients are
/// checked at every coordinate; weights at `weight_coords` coordinates each.
pub fn network_gradchecks(seed: u64, tol: f64, weight_coords: usize) -> Result<Vec<CheckRow>> {
    let arch = toy_arch();
    let mut store = ParamStore::new();
    let mut init = Init::new(seed);
    let gfe = Gfe::new(&mut store, &mut init, "gfe", &arch);
    let den = Denoiser::new(&mut store, &mut init, "den", &arch)?;
    randomize_params(&mut store, seed + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let inputs = vec![
        uniform(&[16, 16, 4], &mut rng, -1.0, 1.0),
        uniform(&[16, 16], &mut rng, -1.0, 1.0),
        Tensor::new(&[1], vec![0.3])?,
    ];
    let opts = GradCheckOptions {
        tol,
        seed,
        ..Default::default()
    };
    let run = |t: &mut Tape, p: &crate::params::Bound, v: &[Var]| -> Result<Var> {
        let pyr = gfe.forward(t, p, v[1])?;
        den.forward(t, p, v[0], v[2], &pyr)
    };
    let inputs_rep = grad_check_many(
        |t, v| {
            let p = store.bind(t);
            run(t, &p, v)
        },
        &inputs,
        &opts,
    )?;
    let mut all = inputs.clone();
    all.extend(store.values().iter().cloned());
    let weight_opts = GradCheckOptions {
        max_coords: Some(weight_coords),
        ..opts.clone()
    };
    let weights_rep = grad_check_many(
        |t, v| {
            let p = store.bind_vars(t, &v[3..])?;
            run(t, &p, v)
        },
        &all,
        &weight_opts,
    )?;

    let mut model = Model::new(&arch, 1, seed + 3)?;
    randomize_params(model.params_mut(), seed + 4);
    let sys = Arc::new(SensingSystem::simulation(16, 16, 4, seed + 5));
    let y = sys.simulate(&blob_scene(16, 16, 4, seed + 6), &NoiseModel::noiseless())?;
    let cg = CgConfig::preset(2);
    let pipeline_rep = grad_check_many(
        |t, v| {
            let p = model.params().bind_vars(t, v)?;
            Ok(model.forward(t, &p, &y, &sys, &cg)?.output())
        },
        model.params().values(),
        &weight_opts,
    )?;
    Ok(vec![
        CheckRow {
            name: "in2set_denoiser_inputs".into(),
            report: inputs_rep,
        },
        CheckRow {
            name: "in2set_denoiser_weights".into(),
            report: weights_rep,
        },
        CheckRow {
            name: "pipeline_k1_weights".into(),
            report: pipeline_rep,
        },
    ])
}

/// Desk-scale training study: seeded synthetic cubes, a small unrolled
/// model and a held-out scene.
#[derive(Clone, Debug)]
pub struct DeskScale {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub train_scenes: usize,
    pub stages: usize,
    pub window: usize,
    pub cg: CgConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for DeskScale {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            bands: 8,
            train_scenes: 8,
            stages: 2,
            window: 8,
            cg: CgConfig::preset(5),
            train: TrainConfig {
                steps: 200,
                lr: 1e-3,
                min_lr: 1e-5,
                batch_size: 1,
                grad_clip: None,
            },
            seed: 2024,
        }
    }
}

/// Simulated data of a [`DeskScale`] study.
#[derive(Clone, Debug)]
pub struct DeskData {
    pub sys: Arc<SensingSystem>,
    pub train: Vec<Sample>,
    pub held_out: Sample,
}

/// Outcome of [`DeskScale::run`].
#[derive(Clone, Debug)]
pub struct DeskRun {
    pub model: Model,
    pub report: TrainReport,
    /// Mean L1 over the training set before and after training.
    pub loss_before: f64,
    pub loss_after: f64,
    /// Held-out PSNR of the initialization `x0` and of the final output.
    pub init_psnr_db: f64,
    pub output_psnr_db: f64,
}

impl DeskScale {
    pub fn arch(&self) -> ArchConfig {
        ArchConfig::new(self.height, self.width, self.bands).with_window(self.window)
    }

    pub fn data(&self) -> Result<DeskData> {
        let sys = Arc::new(SensingSystem::simulation(
            self.height,
            self.width,
            self.bands,
            self.seed,
        ));
        let noise = NoiseModel::noiseless();
        let scene = |s: u64| blob_scene(self.height, self.width, self.bands, s);
        let train = (0..self.train_scenes as u64)
            .map(|i| Sample::simulate(scene(self.seed + 1 + i), &sys, &noise))
            .collect::<Result<_>>()?;
        let held_out = Sample::simulate(scene(self.seed + 10_000), &sys, &noise)?;
        Ok(DeskData { sys, train, held_out })
    }

    pub fn run(&self, data: &DeskData) -> Result<DeskRun> {
        self.run_with(data, Toggles::default(), &self.train)
    }

    /// Trains a fresh model with the given denoiser toggles.
    pub fn run_with(&self, data: &DeskData, toggles: Toggles, cfg: &TrainConfig) -> Result<DeskRun> {
        let mut model = Model::new(&self.arch().with_toggles(toggles), self.stages, self.seed)?;
        let loss_before = dataset_loss(&model, &data.train, &data.sys, &self.cg)?;
        let report = train(&mut model, &data.train, &data.sys, &self.cg, cfg, |_, _| {})?;
        let loss_after = dataset_loss(&model, &data.train, &data.sys, &self.cg)?;
        let r = model.reconstruct(&data.held_out.measurement, &data.sys, &self.cg)?;
        Ok(DeskRun {
            init_psnr_db: psnr(&r.x0, &data.held_out.truth, 1.0)?,
            output_psnr_db: psnr(&r.cube, &data.held_out.truth, 1.0)?,
            model,
            report,
            loss_before,
            loss_after,
        })
    }
}

/// Wall time in milliseconds of each job: the mean of its fastest quarter of
/// `repeats` samples. Jobs run interleaved, starting at a different job every
/// round, so drift in machine load and position effects hit all of them
/// equally. Each timed run follows an untimed run of the same job, so no job
/// inherits the cache and allocator state left by a different one.
pub fn interleaved_fast_ms(jobs: &[&dyn Fn() -> Result<()>], repeats: usize) -> Result<Vec<f64>> {
    let n = jobs.len();
    let rounds = repeats.max(1);
    let mut samples = vec![Vec::with_capacity(rounds); n];
    for round in 0..rounds {
        for k in 0..n {
            let i = (round + k) % n;
            jobs[i]()?;
            let t = Instant::now();
            jobs[i]()?;
            samples[i].push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let keep = rounds.div_ceil(4);
    Ok(samples
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            s[..keep].iter().sum::<f64>() / keep as f64
        })
        .collect())
}

/// One row of the CG-iteration table.
#[derive(Clone, Debug, PartialEq)]
pub struct CgRow {
    pub iters: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub flops: u64,
    pub wall_ms: f64,
    /// Data-step objective after the first stage's CG solve from the
    /// model's own `x0` and `mu_1`.
    pub objective: f64,
}

impl CgRow {
    pub const CSV_HEADER: &'static str = "variant,psnr_db,ssim,flops,wall_ms,data_objective";

    pub fn csv_row(&self) -> String {
        format!(
            "CG-{},{:.4},{:.5},{},{:.3},{:.9e}",
            self.iters, self.psnr_db, self.ssim, self.flops, self.wall_ms, self.objective
        )
    }
}

/// Reconstructs `sample` with each iteration count in `presets`.
pub fn cg_ablation(
    model: &Model,
    sample: &Sample,
    sys: &Arc<SensingSystem>,
    presets: &[usize],
    repeats: usize,
) -> Result<Vec<CgRow>> {
    let cfgs: Vec<CgConfig> = presets.iter().map(|&n| CgConfig::preset(n)).collect();
    let y = &sample.measurement;
    let jobs: Vec<Box<dyn Fn() -> Result<()>>> = cfgs
        .iter()
        .map(|cfg| Box::new(move || model.reconstruct(y, sys, cfg).map(|_| ())) as Box<dyn Fn() -> Result<()>>)
        .collect();
    let refs: Vec<&dyn Fn() -> Result<()>> = jobs.iter().map(|b| b.as_ref()).collect();
    let wall = interleaved_fast_ms(&refs, repeats)?;
    cfgs.iter()
        .zip(wall)
        .map(|(cfg, wall_ms)| {
            let r = model.reconstruct(y, sys, cfg)?;
            let q = QualityReport::evaluate(&r.cube, &sample.truth)?;
            let mu = r.params.mu[0];
            let x1 = data_step(y, &r.x0, mu, sys, cfg)?;
            Ok(CgRow {
                iters: cfg.max_iters,
                psnr_db: q.psnr_db,
                ssim: q.ssim,
                flops: model.flops(sys, cfg).total(),
                wall_ms,
                objective: data_objective(y, &x1, &r.x0, mu, sys)?,
            })
        })
        .collect()
}

/// One row of the break-down table.
#[derive(Clone, Debug, PartialEq)]
pub struct BreakdownRow {
    pub variant: String,
    pub params: usize,
    pub flops: u64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub wall_ms: f64,
    pub final_loss: f64,
}

impl BreakdownRow {
    pub const CSV_HEADER: &'static str = "variant,params,psnr_db,ssim,flops,wall_ms,final_train_loss";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.5},{},{:.3},{:.6}",
            self.variant, self.params, self.psnr_db, self.ssim, self.flops, self.wall_ms, self.final_loss
        )
    }
}

/// Trains each cumulative variant (baseline, +CRW, +MHA-C, +MHA-S) for
/// `cfg.steps` steps and scores it on the held-out scene.
pub fn breakdown_ablation(
    study: &DeskScale,
    data: &DeskData,
    cfg: &TrainConfig,
    repeats: usize,
) -> Result<Vec<BreakdownRow>> {
    Toggles::breakdown()
        .into_iter()
        .map(|(name, toggles)| {
            let run = study.run_with(data, toggles, cfg)?;
            let y = &data.held_out.measurement;
            let job = || run.model.reconstruct(y, &data.sys, &study.cg).map(|_| ());
            let wall = interleaved_fast_ms(&[&job], repeats)?;
            let r = run.model.reconstruct(y, &data.sys, &study.cg)?;
            let q = QualityReport::evaluate(&r.cube, &data.held_out.truth)?;
            Ok(BreakdownRow {
                variant: name.to_owned(),
                params: run.model.params().numel(),
                flops: run.model.flops(&data.sys, &study.cg).total(),
                psnr_db: q.psnr_db,
                ssim: q.ssim,
                wall_ms: wall[0],
                final_loss: run.report.loss_trace.last().copied().unwrap_or(run.loss_before),
            })
        })
        .collect()
}

/// Correlation-proxy reports for `scenes` seeded blob scenes, with the PAN
/// image from a uniform spectral response.
pub fn correlation_suite(
    height: usize,
    width: usize,
    bands: usize,
    scenes: usize,
    seed: u64,
    cfg: &CorrelationConfig,
) -> Result<Vec<CorrProxyReport>> {
    let sys = SensingSystem::simulation(height, width, bands, seed);
    (0..scenes as u64)
        .map(|i| {
            let cube = blob_scene(height, width, bands, seed + i);
            proxy_compare(&cube, &sys.pan_forward(&cube)?, cfg)
        })
        .collect()
}
