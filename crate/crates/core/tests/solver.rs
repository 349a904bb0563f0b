use std::sync::Arc;

use dcchi_core::in2set::ArchConfig;
use dcchi_core::sensing::{MeasurementPair, NoiseModel, SensingSystem};
use dcchi_core::solver::{
    cg_solve, cg_solve_observed, data_objective, data_step, train, CgConfig, Model, Sample, TrainConfig,
};
use dcchi_core::synth::blob_scene;
use dcchi_core::{Error, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    b.transpose() * &b / n as f64 + DMatrix::identity(n, n) * 0.5
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn matvec(a: &DMatrix<f64>) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
    move |v| (a * DVector::from_column_slice(v)).as_slice().to_vec()
}

fn dense_phi(sys: &SensingSystem) -> DMatrix<f64> {
    let t = sys.dense_matrix();
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

/// Explicit solve of `(Phi^T Phi + mu I) x = Phi^T y + mu z`.
fn dense_data_step(sys: &SensingSystem, y: &MeasurementPair, z: &[f64], mu: f64) -> Vec<f64> {
    let phi = dense_phi(sys);
    let n = phi.ncols();
    let a = phi.transpose() * &phi + DMatrix::identity(n, n) * mu;
    let b = phi.transpose() * DVector::from_column_slice(y.stacked().data()) + DVector::from_column_slice(z) * mu;
    a.cholesky().expect("SPD").solve(&b).as_slice().to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn cg_matches_direct_solve() {
    for (n, seed) in [(1, 1), (7, 2), (64, 3), (200, 4), (512, 5)] {
        let a = random_spd(n, seed);
        let b = random_vec(n, seed + 100);
        let exact = a.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&b));
        let out = cg_solve(matvec(&a), &b, &vec![0.0; n], &CgConfig::preset(n)).unwrap();
        let err = max_diff(&out.x, exact.as_slice());
        assert!(err <= 1e-8, "n={n}: {err:e}");
    }
}

#[test]
fn indefinite_system_is_a_numeric_error() {
    let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
    let r = cg_solve(matvec(&a), &[1.0, 1.0], &[0.0, 0.0], &CgConfig::preset(2));
    assert!(matches!(r, Err(Error::Numeric(_))));
}

#[test]
fn data_step_matches_explicit_solve_on_small_systems() {
    for (h, w, c, mu) in [(4, 4, 2, 0.3), (8, 8, 4, 0.05), (6, 8, 3, 2.0)] {
        let sys = SensingSystem::simulation(h, w, c, 7);
        let y = sys.simulate(&blob_scene(h, w, c, 1), &NoiseModel::noiseless()).unwrap();
        let z = Tensor::from_fn(&[h, w, c], |i| random_vec(h * w * c, 9)[i]);
        let n = h * w * c;
        let got = data_step(&y, &z, mu, &sys, &CgConfig::preset(n)).unwrap();
        let want = dense_data_step(&sys, &y, z.data(), mu);
        let err = max_diff(got.data(), &want);
        assert!(err <= 1e-8, "{h}x{w}x{c}: {err:e}");
    }
}

#[test]
fn huge_penalty_pins_the_data_step_to_z() {
    let sys = SensingSystem::simulation(8, 8, 4, 3);
    let y = sys.simulate(&blob_scene(8, 8, 4, 2), &NoiseModel::noiseless()).unwrap();
    let z = blob_scene(8, 8, 4, 5);
    let x = data_step(&y, &z, 1e8, &sys, &CgConfig::preset(5)).unwrap();
    assert!(x.max_abs_diff(&z) < 1e-7);
}

#[test]
fn objective_is_non_increasing_in_iterations() {
    let sys = SensingSystem::simulation(16, 16, 8, 4);
    let y = sys
        .simulate(&blob_scene(16, 16, 8, 6), &NoiseModel::noiseless())
        .unwrap();
    let z = Tensor::full(&[16, 16, 8], 0.2);
    let mut prev = data_objective(&y, &z, &z, 0.1, &sys).unwrap();
    for it in 1..=30 {
        let x = data_step(&y, &z, 0.1, &sys, &CgConfig::preset(it)).unwrap();
        let f = data_objective(&y, &x, &z, 0.1, &sys).unwrap();
        assert!(f <= prev * (1.0 + 1e-12), "iteration {it}: {f} > {prev}");
        prev = f;
    }
}

/// Identity denoisers reduce the unrolled network to repeated Tikhonov
/// refinements `x_k = (Phi^T Phi + mu_k I)^-1 (Phi^T y + mu_k x_{k-1})`.
#[test]
fn identity_denoiser_pipeline_is_iterated_tikhonov() {
    let (h, w, c, stages) = (4, 4, 2, 3);
    let arch = ArchConfig::new(h, w, c).with_window(1);
    let mut model = Model::new(&arch, stages, 1).unwrap();
    model.make_denoisers_identity();
    let sys = Arc::new(SensingSystem::simulation(h, w, c, 2));
    let y = sys.simulate(&blob_scene(h, w, c, 3), &NoiseModel::noiseless()).unwrap();
    let r = model.reconstruct(&y, &sys, &CgConfig::preset(h * w * c)).unwrap();
    let mut x = r.x0.data().to_vec();
    for &mu in &r.params.mu {
        x = dense_data_step(&sys, &y, &x, mu);
    }
    let err = max_diff(r.cube.data(), &x);
    assert!(err <= 1e-8, "{err:e}");
}

fn tiny_setup() -> (Model, Vec<Sample>, Arc<SensingSystem>) {
    let arch = ArchConfig::new(16, 16, 4).with_window(4);
    let model = Model::new(&arch, 1, 9).unwrap();
    let sys = Arc::new(SensingSystem::simulation(16, 16, 4, 10));
    let samples = (0..2)
        .map(|i| Sample::simulate(blob_scene(16, 16, 4, 20 + i), &sys, &NoiseModel::noiseless()).unwrap())
        .collect();
    (model, samples, sys)
}

fn cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        lr,
        min_lr: 0.0,
        batch_size: 2,
        grad_clip: None,
    }
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let (mut model, samples, sys) = tiny_setup();
    let before = model.params().clone();
    let rep = train(
        &mut model,
        &samples,
        &sys,
        &CgConfig::preset(2),
        &cfg(3, 0.0),
        |_, _| {},
    )
    .unwrap();
    assert_eq!(rep.loss_trace.len(), 3);
    assert_eq!(model.params(), &before);
    assert!(rep.loss_trace.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_is_reproducible_and_reports_every_step() {
    let run = || {
        let (mut model, samples, sys) = tiny_setup();
        let mut seen = Vec::new();
        let rep = train(
            &mut model,
            &samples,
            &sys,
            &CgConfig::preset(2),
            &cfg(12, 2e-3),
            |s, l| seen.push((s, l)),
        )
        .unwrap();
        assert_eq!(seen.len(), 12);
        assert_eq!(rep.lr_trace.len(), 12);
        (rep.loss_trace, model.params().clone())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert!(a.last().unwrap() < &a[0], "{a:?}");
}

#[test]
fn non_finite_loss_aborts() {
    let (mut model, mut samples, sys) = tiny_setup();
    samples[1].truth.data_mut()[0] = f64::NAN;
    let r = train(
        &mut model,
        &samples,
        &sys,
        &CgConfig::preset(1),
        &cfg(1, 1e-3),
        |_, _| {},
    );
    assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
}

#[test]
fn flops_grow_by_operator_work_per_cg_iteration() {
    let (model, _, sys) = tiny_setup();
    let n = sys.scene_len() as u64;
    let f = |k| model.flops(&sys, &CgConfig::preset(k)).total();
    assert_eq!(f(2) - f(1), 4 * n);
    assert_eq!(f(10) - f(5), 5 * 4 * n);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn a_norm_error_never_increases(n in 2usize..40, seed in any::<u64>()) {
        let a = random_spd(n, seed);
        let b = random_vec(n, seed.wrapping_add(1));
        let x0 = random_vec(n, seed.wrapping_add(2));
        let exact = a.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&b));
        let a_norm = |x: &[f64]| {
            let e = DVector::from_column_slice(x) - &exact;
            (e.transpose() * &a * &e)[(0, 0)]
        };
        let mut errs = vec![a_norm(&x0)];
        cg_solve_observed(matvec(&a), &b, &x0, &CgConfig::preset(n), |_, x| errs.push(a_norm(x))).unwrap();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-20, "{:?}", errs);
        }
    }

    #[test]
    fn cg_is_exact_on_diagonal_systems_in_distinct_eigenvalue_steps(seed in any::<u64>()) {
        // k distinct eigenvalues: CG terminates in k steps
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = [0.5, 2.0, 7.0];
        let d: Vec<f64> = (0..24).map(|_| vals[rng.random_range(0..3)]).collect();
        let b = random_vec(24, seed.wrapping_add(3));
        let out = cg_solve(|v| v.iter().zip(&d).map(|(a, b)| a * b).collect(), &b, &[0.0; 24], &CgConfig::preset(3)).unwrap();
        let exact: Vec<f64> = b.iter().zip(&d).map(|(b, d)| b / d).collect();
        prop_assert!(max_diff(&out.x, &exact) < 1e-10);
    }
}
