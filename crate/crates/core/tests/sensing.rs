use std::sync::Arc;

use dcchi_core::sensing::{shift_cube, unshift_cube, CodedMask, Direction, NoiseModel, SensingSystem};
use dcchi_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn system(h: usize, w: usize, c: usize, step: usize, dir: Direction, seed: u64) -> SensingSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    SensingSystem::new(
        CodedMask::bernoulli(h, w, seed),
        step,
        dir,
        raw.iter().map(|v| v / s).collect(),
    )
    .unwrap()
}

/// Gather form of the CASSI image: each detector pixel sums the masked
/// scene values that disperse onto it.
fn cassi_oracle(sys: &SensingSystem, x: &Tensor) -> Tensor {
    let (h, w, c, d) = (sys.height(), sys.width(), sys.bands(), sys.step());
    let [ch, cw] = sys.cassi_shape();
    let m = sys.mask().transmission();
    Tensor::from_fn(&[ch, cw], |i| {
        let (r, q) = (i / cw, i % cw);
        (0..c)
            .filter_map(|b| {
                let (sr, sq) = match sys.direction() {
                    Direction::Right => (r as isize, q as isize - (b * d) as isize),
                    Direction::Up => (r as isize - ((c - 1 - b) * d) as isize, q as isize),
                };
                (sr >= 0 && sq >= 0 && (sr as usize) < h && (sq as usize) < w)
                    .then(|| m.at(&[sr as usize, sq as usize]) * x.at(&[sr as usize, sq as usize, b]))
            })
            .sum()
    })
}

fn rel_adjoint_defect(ax: &Tensor, y: &Tensor, x: &Tensor, aty: &Tensor) -> f64 {
    let lhs = ax.dot(y);
    let rhs = x.dot(aty);
    (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300)
}

#[test]
fn forward_matches_gather_oracle() {
    for dir in [Direction::Right, Direction::Up] {
        for step in [1, 2, 3] {
            let sys = system(5, 7, 4, step, dir, step as u64);
            let x = random(&[5, 7, 4], 9);
            let y = sys.cassi_forward(&x).unwrap();
            assert_eq!(y.max_abs_diff(&cassi_oracle(&sys, &x)), 0.0, "{dir:?} d={step}");
            let pan = sys.pan_forward(&x).unwrap();
            for i in 0..5 {
                for j in 0..7 {
                    let e: f64 = (0..4).map(|b| sys.pan_response()[b] * x.at(&[i, j, b])).sum();
                    assert!((pan.at(&[i, j]) - e).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn shift_is_a_partial_isometry() {
    let x = random(&[4, 5, 3], 2);
    for dir in [Direction::Right, Direction::Up] {
        let s = shift_cube(&x, 2, dir).unwrap();
        assert_eq!(unshift_cube(&s, 4, 5, 2, dir).unwrap(), x);
        assert!((s.norm() - x.norm()).abs() < 1e-12);
    }
}

#[test]
fn dense_matrix_reproduces_matrix_free_application_exactly() {
    for (h, w, c) in [(4, 4, 2), (8, 8, 3), (6, 8, 4)] {
        let sys = system(h, w, c, 2, Direction::Right, 3);
        let a = sys.dense_matrix();
        let (m, n) = (sys.measurement_len(), sys.scene_len());
        assert_eq!(a.shape(), [m, n]);
        let x = random(&[h, w, c], 4);
        let y = sys.phi_apply(&x).unwrap();
        let y2 = random(&[m], 5);
        let aty = sys.phi_adjoint(&y2).unwrap();
        for i in 0..m {
            // every row has at most C nonzeros, so the sum is computed in the
            // same order as the matrix-free scatter
            let row: f64 = (0..n).map(|j| a.data()[i * n + j] * x.data()[j]).sum();
            assert_eq!(row, y.data()[i], "row {i}");
        }
        for j in 0..n {
            let col: f64 = (0..m).map(|i| a.data()[i * n + j] * y2.data()[i]).sum();
            assert!((col - aty.data()[j]).abs() <= 1e-15 * (1.0 + col.abs()));
        }
    }
}

#[test]
fn adjoint_suite_16x16x8() {
    let t = std::time::Instant::now();
    let sys = SensingSystem::simulation(16, 16, 8, 1);
    for seed in 0..20 {
        let x = random(&[16, 16, 8], 100 + seed);
        let yc = random(&sys.cassi_shape(), 200 + seed);
        let yp = random(&[16, 16], 300 + seed);
        let y = random(&[sys.measurement_len()], 400 + seed);
        let dc = rel_adjoint_defect(
            &sys.cassi_forward(&x).unwrap(),
            &yc,
            &x,
            &sys.cassi_adjoint(&yc).unwrap(),
        );
        let dp = rel_adjoint_defect(&sys.pan_forward(&x).unwrap(), &yp, &x, &sys.pan_adjoint(&yp).unwrap());
        let d = rel_adjoint_defect(&sys.phi_apply(&x).unwrap(), &y, &x, &sys.phi_adjoint(&y).unwrap());
        assert!(dc <= 1e-10 && dp <= 1e-10 && d <= 1e-10, "seed {seed}: {dc} {dp} {d}");
    }
    assert!(t.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn operator_wrappers_agree_with_methods() {
    let sys = Arc::new(system(6, 6, 3, 2, Direction::Up, 8));
    let x = random(&[6, 6, 3], 1);
    let op = sys.operator();
    assert_eq!(op.apply(x.data()), sys.phi_apply(&x).unwrap().into_data());
    let c = sys.cassi_operator();
    assert_eq!(c.apply(x.data()), sys.cassi_forward(&x).unwrap().into_data());
    assert_eq!(c.output_shape(), sys.cassi_shape().to_vec());
}

#[test]
fn simulation_is_seeded_and_noiseless_flag_is_exact() {
    let sys = SensingSystem::simulation(8, 8, 4, 2);
    let x = random(&[8, 8, 4], 3).map(f64::abs);
    let clean = sys.simulate(&x, &NoiseModel::noiseless()).unwrap();
    assert_eq!(clean.cassi, sys.cassi_forward(&x).unwrap());
    let noise = NoiseModel {
        sigma_c: 0.01,
        sigma_p: 0.02,
        seed: 5,
    };
    let a = sys.simulate(&x, &noise).unwrap();
    assert_eq!(a, sys.simulate(&x, &noise).unwrap());
    assert_ne!(a.cassi, clean.cassi);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_identity_holds(
        h in 1usize..9, w in 1usize..9, c in 1usize..6, step in 0usize..4,
        up in any::<bool>(), seed in any::<u64>(),
    ) {
        let dir = if up { Direction::Up } else { Direction::Right };
        let sys = system(h, w, c, step, dir, seed);
        let x = random(&[h, w, c], seed.wrapping_add(1));
        let y = random(&[sys.measurement_len()], seed.wrapping_add(2));
        let d = rel_adjoint_defect(&sys.phi_apply(&x).unwrap(), &y, &x, &sys.phi_adjoint(&y).unwrap());
        prop_assert!(d <= 1e-12, "defect {}", d);
    }

    #[test]
    fn forward_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let sys = system(6, 5, 4, 2, Direction::Right, seed);
        let x1 = random(&[6, 5, 4], seed.wrapping_add(1));
        let x2 = random(&[6, 5, 4], seed.wrapping_add(2));
        let comb = Tensor::from_fn(&[6, 5, 4], |i| a * x1.data()[i] + b * x2.data()[i]);
        let lhs = sys.phi_apply(&comb).unwrap();
        let (p, q) = (sys.phi_apply(&x1).unwrap(), sys.phi_apply(&x2).unwrap());
        for i in 0..lhs.numel() {
            let rhs = a * p.data()[i] + b * q.data()[i];
            prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
