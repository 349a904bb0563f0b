//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use dcchi_core::experiments::{
    breakdown_ablation, cg_ablation, correlation_suite, network_gradchecks, primitive_gradchecks, DeskData, DeskRun,
    DeskScale,
};
use dcchi_core::in2set::{ArchConfig, Denoiser, Gfe, In2Ab, WindowMode};
use dcchi_core::io::{decode_tensor, encode_tensor, load_tensor, save_tensor, Checkpoint, RunConfig};
use dcchi_core::metrics::CorrelationConfig;
use dcchi_core::params::{Init, ParamStore};
use dcchi_core::sensing::{MeasurementPair, NoiseModel, SensingSystem};
use dcchi_core::solver::{cg_solve, cg_solve_observed, data_objective, data_step, CgConfig, Model, TrainConfig};
use dcchi_core::synth::blob_scene;
use dcchi_core::{Tape, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    random(&[n], seed).data().to_vec()
}

fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    b.transpose() * &b / n as f64 + DMatrix::identity(n, n) * 0.5
}

fn matvec(a: &DMatrix<f64>) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |v| (a * DVector::from_column_slice(v)).as_slice().to_vec()
}

fn dense_phi(sys: &SensingSystem) -> DMatrix<f64> {
    let t = sys.dense_matrix();
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn rel_defect(ax: &Tensor, y: &Tensor, x: &Tensor, aty: &Tensor) -> f64 {
    let (l, r) = (ax.dot(y), x.dot(aty));
    (l - r).abs() / l.abs().max(r.abs()).max(1e-300)
}

fn adjoint_suite() -> Outcome {
    let t = Instant::now();
    let sys = SensingSystem::simulation(16, 16, 8, 1);
    let mut worst = 0.0f64;
    for s in 0..20 {
        let x = random(&[16, 16, 8], 100 + s);
        let yc = random(&sys.cassi_shape(), 200 + s);
        let yp = random(&[16, 16], 300 + s);
        let y = random(&[sys.measurement_len()], 400 + s);
        let e = |r: dcchi_core::Result<Tensor>| r.map_err(|e| e.to_string());
        worst = worst
            .max(rel_defect(
                &e(sys.cassi_forward(&x))?,
                &yc,
                &x,
                &e(sys.cassi_adjoint(&yc))?,
            ))
            .max(rel_defect(&e(sys.pan_forward(&x))?, &yp, &x, &e(sys.pan_adjoint(&yp))?))
            .max(rel_defect(&e(sys.phi_apply(&x))?, &y, &x, &e(sys.phi_adjoint(&y))?));
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst <= 1e-10 && secs < 5.0,
        format!("max defect {worst:.2e}, {secs:.2} s"),
    )
}

fn dense_oracle() -> Outcome {
    let mut worst_step = 0.0f64;
    for (h, w, c) in [(4, 4, 2), (6, 8, 3), (8, 8, 4)] {
        let sys = SensingSystem::simulation(h, w, c, 7);
        let phi = dense_phi(&sys);
        let x = random(&[h, w, c], 1);
        let y = sys.phi_apply(&x).unwrap();
        let n = sys.scene_len();
        for i in 0..sys.measurement_len() {
            let row: f64 = (0..n).map(|j| phi[(i, j)] * x.data()[j]).sum();
            if row != y.data()[i] {
                return Err(format!("{h}x{w}x{c}: row {i} differs"));
            }
        }
        let meas = sys.simulate(&blob_scene(h, w, c, 2), &NoiseModel::noiseless()).unwrap();
        let z = random(&[h, w, c], 3);
        let mu = 0.3;
        let got = data_step(&meas, &z, mu, &sys, &CgConfig::preset(n)).unwrap();
        let a = phi.transpose() * &phi + DMatrix::identity(n, n) * mu;
        let b = phi.transpose() * DVector::from_column_slice(meas.stacked().data())
            + DVector::from_column_slice(z.data()) * mu;
        let want = a.cholesky().unwrap().solve(&b);
        worst_step = worst_step.max(max_diff(got.data(), want.as_slice()));
    }
    check(
        worst_step <= 1e-8,
        format!("exact products, data-step error {worst_step:.2e}"),
    )
}

fn cg_correctness() -> Outcome {
    let mut worst = 0.0f64;
    for (n, seed) in [(1, 1), (32, 2), (128, 3), (512, 4)] {
        let a = random_spd(n, seed);
        let b = random_vec(n, seed + 10);
        let exact = a.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&b));
        let out = cg_solve(matvec(&a), &b, &vec![0.0; n], &CgConfig::preset(n)).unwrap();
        worst = worst.max(max_diff(&out.x, exact.as_slice()));

        let x0 = random_vec(n, seed + 20);
        let a_norm = |x: &[f64]| {
            let e = DVector::from_column_slice(x) - &exact;
            (e.transpose() * &a * &e)[(0, 0)]
        };
        let mut errs = vec![a_norm(&x0)];
        cg_solve_observed(matvec(&a), &b, &x0, &CgConfig::preset(n), |_, x| errs.push(a_norm(x))).unwrap();
        // the guard only absorbs roundoff in the dense error evaluation
        if let Some(k) = errs.windows(2).position(|w| w[1] > w[0] * (1.0 + 1e-9) + 1e-20) {
            return Err(format!("n={n}: A-norm error rose at iteration {}", k + 1));
        }
    }

    let sys = SensingSystem::simulation(8, 8, 4, 3);
    let y = sys.simulate(&blob_scene(8, 8, 4, 4), &NoiseModel::noiseless()).unwrap();
    let z = random(&[8, 8, 4], 5);
    let mut objs = Vec::new();
    for it in 1..=30 {
        let x = data_step(&y, &z, 0.2, &sys, &CgConfig::preset(it)).unwrap();
        objs.push(data_objective(&y, &x, &z, 0.2, &sys).unwrap());
    }
    if let Some(k) = objs.windows(2).position(|w| w[1] > w[0] * (1.0 + 1e-12)) {
        return Err(format!("objective rose from max_iters {} to {}", k + 1, k + 2));
    }
    check(
        worst <= 1e-8,
        format!("direct-solve error {worst:.2e}, monotone A-norm and objective"),
    )
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut rows = primitive_gradchecks(11, 1e-4).map_err(|e| e.to_string())?;
    let n_prim = rows.len();
    rows.extend(network_gradchecks(11, 1e-3, 8).map_err(|e| e.to_string())?);
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<_> = rows
        .iter()
        .filter(|r| !r.report.passed)
        .map(|r| r.name.clone())
        .collect();
    let worst = rows
        .iter()
        .max_by(|a, b| (a.report.max_rel_error / a.report.tol).total_cmp(&(b.report.max_rel_error / b.report.tol)))
        .unwrap();
    check(
        failed.is_empty() && secs < 600.0,
        format!(
            "{n_prim} primitives + {} network checks, worst {} at {:.2e} (tol {:.0e}), {secs:.1} s, failed {failed:?}",
            rows.len() - n_prim,
            worst.name,
            worst.report.max_rel_error,
            worst.report.tol
        ),
    )
}

fn residual_identities() -> Outcome {
    let arch = ArchConfig::new(32, 32, 8);
    let x = random(&[32, 32, 8], 11);

    let mut store = ParamStore::new();
    let blk = In2Ab::new(&mut store, &mut Init::new(2), "b", &arch, 0, WindowMode::Local).unwrap();
    dcchi_core::experiments::randomize_params(&mut store, 4);
    blk.zero_output_projections(&mut store);
    let mut tape = Tape::inference();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let g = tape.constant(random(&[32, 32, 4], 12));
    let y = blk.forward(&mut tape, &p, xv, g).unwrap();
    let d_block = tape.value(y).max_abs_diff(&x);

    let mut store = ParamStore::new();
    let mut init = Init::new(3);
    let gfe = Gfe::new(&mut store, &mut init, "gfe", &arch);
    let den = Denoiser::new(&mut store, &mut init, "den", &arch).unwrap();
    dcchi_core::experiments::randomize_params(&mut store, 5);
    store.get_mut(den.output_kernel()).data_mut().fill(0.0);
    let mut tape = Tape::inference();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let pan = tape.constant(random(&[32, 32], 13));
    let s = tape.constant(Tensor::scalar(0.1));
    let pyr = gfe.forward(&mut tape, &p, pan).unwrap();
    let out = den.forward(&mut tape, &p, xv, s, &pyr).unwrap();
    let d_den = tape.value(out).max_abs_diff(&x);
    check(
        d_block == 0.0 && d_den == 0.0,
        format!("in2ab {d_block:e}, denoiser {d_den:e}"),
    )
}

struct Desk {
    study: DeskScale,
    data: DeskData,
    run: DeskRun,
    secs: f64,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let study = DeskScale::default();
        let data = study.data().unwrap();
        let t = Instant::now();
        let run = study.run(&data).unwrap();
        Desk {
            secs: t.elapsed().as_secs_f64(),
            study,
            data,
            run,
        }
    })
}

fn learning_signal() -> Outcome {
    let d = desk();
    let r = &d.run;
    let ratio = r.loss_after / r.loss_before;
    let gain = r.output_psnr_db - r.init_psnr_db;
    check(
        ratio < 0.5 && gain >= 3.0 && d.secs < 1800.0,
        format!(
            "L1 {:.4} -> {:.4} (ratio {ratio:.3}), held-out PSNR {:.2} -> {:.2} dB (+{gain:.2}), {:.1} s",
            r.loss_before, r.loss_after, r.init_psnr_db, r.output_psnr_db, d.secs
        ),
    )
}

fn cg_harness() -> Outcome {
    let d = desk();
    let rows =
        cg_ablation(&d.run.model, &d.data.held_out, &d.data.sys, &CgConfig::PRESETS, 61).map_err(|e| e.to_string())?;
    let iters: Vec<_> = rows.iter().map(|r| r.iters).collect();
    let wall: Vec<_> = rows.iter().map(|r| r.wall_ms).collect();
    let obj: Vec<_> = rows.iter().map(|r| r.objective).collect();
    let rising = wall.windows(2).all(|w| w[0] < w[1]);
    let falling = obj.windows(2).all(|w| w[1] <= w[0]);
    check(
        iters == CgConfig::PRESETS && rising && falling,
        format!("wall ms {wall:.2?}, objective {obj:.4?}"),
    )
}

fn breakdown_harness() -> Outcome {
    let d = desk();
    let cfg = TrainConfig {
        steps: 1,
        ..d.study.train.clone()
    };
    let rows = breakdown_ablation(&d.study, &d.data, &cfg, 1).map_err(|e| e.to_string())?;
    let names: Vec<_> = rows.iter().map(|r| r.variant.as_str()).collect();
    let flops: Vec<_> = rows.iter().map(|r| r.flops).collect();
    let finite = rows.iter().all(|r| r.final_loss.is_finite() && r.psnr_db.is_finite());
    check(
        names == ["baseline", "+CRW", "+MHA-C", "+MHA-S"] && finite && flops.windows(2).all(|w| w[0] < w[1]),
        format!("{names:?} flops {flops:?}"),
    )
}

fn intra_similarity() -> Outcome {
    let reps = correlation_suite(32, 32, 8, 10, 77, &CorrelationConfig::default()).map_err(|e| e.to_string())?;
    let mean = reps.iter().map(|r| r.correlation).sum::<f64>() / reps.len() as f64;
    let min = reps.iter().map(|r| r.correlation).fold(f64::INFINITY, f64::min);
    check(
        reps.len() == 10 && mean >= 0.9,
        format!("mean correlation {mean:.4} (min {min:.4})"),
    )
}

fn io_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let raw = Tensor::from_fn(&[3, 5, 2], |_| f64::from_bits(rng.random()));
    let (back, used) = decode_tensor(&encode_tensor(&raw), 0).map_err(|e| e.to_string())?;
    if bits(&back) != bits(&raw) || used != encode_tensor(&raw).len() {
        return Err("tensor bytes did not round-trip".into());
    }

    let mut cfg = RunConfig::simulation(16, 16, 4, 3);
    cfg.arch.window = 4;
    cfg.stages = 2;
    let spec = cfg.model_spec();
    let model = Model::new(&spec.arch, spec.stages, 5).unwrap();
    let ck = dir.path().join("m.dck");
    Checkpoint::from_store(&spec, model.params())
        .save(&ck)
        .map_err(|e| e.to_string())?;
    let mut restored = Model::new(&spec.arch, spec.stages, 6).unwrap();
    let loaded = Checkpoint::load(&ck).map_err(|e| e.to_string())?;
    loaded.check_spec(&spec).map_err(|e| e.to_string())?;
    loaded.load_into(restored.params_mut()).map_err(|e| e.to_string())?;
    let same = restored
        .params()
        .values()
        .iter()
        .zip(model.params().values())
        .all(|(a, b)| bits(a) == bits(b));
    if !same {
        return Err("checkpoint weights changed".into());
    }

    let write = |name: &str| -> Vec<u8> {
        let m = Model::new(&spec.arch, spec.stages, 5).unwrap();
        let sys = Arc::new(cfg.sensing.build(&cfg.base_dir).unwrap());
        let y = sys.simulate(&blob_scene(16, 16, 4, 8), &cfg.noise).unwrap();
        let y = MeasurementPair::new(&sys, y.cassi, y.pan).unwrap();
        let r = m.reconstruct(&y, &sys, &cfg.cg).unwrap();
        let p = dir.path().join(name);
        save_tensor(&p, &r.cube).unwrap();
        assert_eq!(bits(&load_tensor(&p).unwrap()), bits(&r.cube));
        std::fs::read(p).unwrap()
    };
    let (a, b) = (write("a.dct"), write("b.dct"));
    check(
        a == b,
        format!(
            "checkpoint and tensor round trips bitwise, reconstruction files {} bytes identical",
            a.len()
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("1 adjoint suite", adjoint_suite),
        ("2 dense-oracle equivalence", dense_oracle),
        ("3 CG correctness", cg_correctness),
        ("4 gradient suite", gradient_suite),
        ("5 residual identities", residual_identities),
        ("6 desk-scale learning signal", learning_signal),
        ("7 CG-iteration harness", cg_harness),
        ("8 break-down harness", breakdown_harness),
        ("9 intra-similarity proxy", intra_similarity),
        ("10 IO determinism", io_determinism),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                println!("FAIL  {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
