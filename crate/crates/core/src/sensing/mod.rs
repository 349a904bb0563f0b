//! The dual-camera forward model.
//!
//! A scene cube `x` of shape `[H, W, C]` is flattened row-major (`h`, then
//! `w`, then `c`). The CASSI branch masks every band with the coded aperture,
//! translates band `c` by `c * d` pixels along the dispersion axis and sums
//! the bands on the detector. The PAN branch integrates the bands per pixel
//! with the sensor response. The stacked measurement is `[y_cassi; y_pan]`
//! with `M = H(W + d(C-1)) + HW` entries (for horizontal dispersion).

mod config;

pub use config::{MaskSource, SensingConfig};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{LinearOperator, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Band `c` lands `c * d` columns to the right.
    Right,
    /// Band `c` lands `c * d` rows above band 0.
    Up,
}

/// Coded aperture transmission pattern, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedMask {
    transmission: Tensor,
    seed: Option<u64>,
}

impl CodedMask {
    /// Binary Bernoulli(0.5) pattern, reproducible from `seed`.
    pub fn bernoulli(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::from_fn(&[height, width], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        Self {
            transmission: t,
            seed: Some(seed),
        }
    }

    pub fn from_tensor(transmission: Tensor) -> Result<Self> {
        if transmission.ndim() != 2 {
            return Err(dim_err(format!("mask must be 2-D, got {:?}", transmission.shape())));
        }
        if transmission.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("mask values must lie in [0, 1]".into()));
        }
        Ok(Self {
            transmission,
            seed: None,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_tensor(Tensor::full(&[height, width], value))
    }

    pub fn transmission(&self) -> &Tensor {
        &self.transmission
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }
}

/// Coded mask, dispersion and PAN response: everything that defines `Phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingSystem {
    mask: CodedMask,
    step: usize,
    direction: Direction,
    pan_response: Vec<f64>,
    height: usize,
    width: usize,
    bands: usize,
}

impl SensingSystem {
    /// Validates that the PAN response is non-negative and sums to one.
    pub fn new(mask: CodedMask, step: usize, direction: Direction, pan_response: Vec<f64>) -> Result<Self> {
        let sum: f64 = pan_response.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("pan response must sum to 1, sums to {sum}")));
        }
        Self::new_unnormalized(mask, step, direction, pan_response)
    }

    /// Like [`SensingSystem::new`] but only requires non-negative response
    /// weights (raw calibration curves, degenerate test systems).
    pub fn new_unnormalized(
        mask: CodedMask,
        step: usize,
        direction: Direction,
        pan_response: Vec<f64>,
    ) -> Result<Self> {
        let [height, width] = *mask.transmission.shape() else {
            unreachable!("mask is 2-D by construction")
        };
        if pan_response.is_empty() {
            return Err(Error::Config("pan response needs at least one band".into()));
        }
        if pan_response.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("pan response weights must be non-negative".into()));
        }
        Ok(Self {
            bands: pan_response.len(),
            mask,
            step,
            direction,
            pan_response,
            height,
            width,
        })
    }

    /// Simulation preset: Bernoulli mask, `d = 2` to the right, flat response.
    pub fn simulation(height: usize, width: usize, bands: usize, mask_seed: u64) -> Self {
        Self::new(
            CodedMask::bernoulli(height, width, mask_seed),
            2,
            Direction::Right,
            vec![1.0 / bands as f64; bands],
        )
        .expect("uniform response is valid")
    }

    /// Real-hardware preset: `d = 1`, dispersion upwards.
    pub fn real_hardware(height: usize, width: usize, bands: usize, mask_seed: u64) -> Self {
        Self::new(
            CodedMask::bernoulli(height, width, mask_seed),
            1,
            Direction::Up,
            vec![1.0 / bands as f64; bands],
        )
        .expect("uniform response is valid")
    }

    pub fn mask(&self) -> &CodedMask {
        &self.mask
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn pan_response(&self) -> &[f64] {
        &self.pan_response
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn cube_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.bands]
    }

    /// Detector shape of the CASSI branch.
    pub fn cassi_shape(&self) -> [usize; 2] {
        let spread = self.step * (self.bands - 1);
        match self.direction {
            Direction::Right => [self.height, self.width + spread],
            Direction::Up => [self.height + spread, self.width],
        }
    }

    /// Stacked measurement length `M`.
    pub fn measurement_len(&self) -> usize {
        let [a, b] = self.cassi_shape();
        a * b + self.height * self.width
    }

    /// Scene length `N = HWC`.
    pub fn scene_len(&self) -> usize {
        self.height * self.width * self.bands
    }

    /// Detector position of scene pixel `(h, w)` in band `c`.
    #[inline]
    fn target(&self, h: usize, w: usize, c: usize) -> (usize, usize) {
        match self.direction {
            Direction::Right => (h, w + c * self.step),
            Direction::Up => (h + (self.bands - 1 - c) * self.step, w),
        }
    }

    fn check_cube(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.cube_shape() {
            return Err(dim_err(format!(
                "cube {:?} does not match sensing system {:?}",
                x.shape(),
                self.cube_shape()
            )));
        }
        Ok(())
    }

    fn check_2d(&self, y: &Tensor, expected: [usize; 2], what: &str) -> Result<()> {
        if y.shape() != expected {
            return Err(dim_err(format!(
                "{what} {:?} does not match expected {expected:?}",
                y.shape()
            )));
        }
        Ok(())
    }

    /// `y_c = sum_c shift(mask * x[:, :, c])`, noise free.
    pub fn cassi_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_cube(x)?;
        Ok(self.cassi_forward_raw(x.data()))
    }

    fn cassi_forward_raw(&self, x: &[f64]) -> Tensor {
        let [ch, cw] = self.cassi_shape();
        let mut y = vec![0.0; ch * cw];
        let m = self.mask.transmission.data();
        let c_n = self.bands;
        for h in 0..self.height {
            for w in 0..self.width {
                let mv = m[h * self.width + w];
                let px = &x[(h * self.width + w) * c_n..(h * self.width + w + 1) * c_n];
                for (c, &v) in px.iter().enumerate() {
                    let (th, tw) = self.target(h, w, c);
                    y[th * cw + tw] += mv * v;
                }
            }
        }
        Tensor::new(&[ch, cw], y).expect("shape consistent")
    }

    /// Exact adjoint of [`Self::cassi_forward`].
    pub fn cassi_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.check_2d(y, self.cassi_shape(), "cassi measurement")?;
        Ok(self.cassi_adjoint_raw(y.data()))
    }

    fn cassi_adjoint_raw(&self, y: &[f64]) -> Tensor {
        let [_, cw] = self.cassi_shape();
        let m = self.mask.transmission.data();
        let c_n = self.bands;
        let mut x = vec![0.0; self.scene_len()];
        for h in 0..self.height {
            for w in 0..self.width {
                let mv = m[h * self.width + w];
                let base = (h * self.width + w) * c_n;
                for c in 0..c_n {
                    let (th, tw) = self.target(h, w, c);
                    x[base + c] = mv * y[th * cw + tw];
                }
            }
        }
        Tensor::new(&self.cube_shape(), x).expect("shape consistent")
    }

    /// Per-pixel weighted band sum.
    pub fn pan_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_cube(x)?;
        Ok(self.pan_forward_raw(x.data()))
    }

    fn pan_forward_raw(&self, x: &[f64]) -> Tensor {
        let data = x
            .chunks(self.bands)
            .map(|px| px.iter().zip(&self.pan_response).map(|(a, b)| a * b).sum())
            .collect();
        Tensor::new(&[self.height, self.width], data).expect("shape consistent")
    }

    /// Outer product of the PAN image with the response weights.
    pub fn pan_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        self.check_2d(y, [self.height, self.width], "pan image")?;
        Ok(self.pan_adjoint_raw(y.data()))
    }

    fn pan_adjoint_raw(&self, y: &[f64]) -> Tensor {
        let data = y
            .iter()
            .flat_map(|&v| self.pan_response.iter().map(move |r| r * v))
            .collect();
        Tensor::new(&self.cube_shape(), data).expect("shape consistent")
    }

    /// `Phi x = [y_c; y_p]` as a flat vector of length `M`.
    pub fn phi_apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.numel() != self.scene_len() {
            return Err(dim_err(format!(
                "scene of {} values, system expects N = {}",
                x.numel(),
                self.scene_len()
            )));
        }
        Ok(Tensor::new(&[self.measurement_len()], self.phi_apply_raw(x.data())).expect("length"))
    }

    fn phi_apply_raw(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.cassi_forward_raw(x).into_data();
        out.extend(self.pan_forward_raw(x).into_data());
        out
    }

    /// `Phi^T y`, returned as an `[H, W, C]` cube.
    pub fn phi_adjoint(&self, y: &Tensor) -> Result<Tensor> {
        if y.numel() != self.measurement_len() {
            return Err(dim_err(format!(
                "measurement of {} values, system expects M = {}",
                y.numel(),
                self.measurement_len()
            )));
        }
        Ok(Tensor::new(&self.cube_shape(), self.phi_adjoint_raw(y.data())).expect("length"))
    }

    fn phi_adjoint_raw(&self, y: &[f64]) -> Vec<f64> {
        let split = self.measurement_len() - self.height * self.width;
        let mut x = self.cassi_adjoint_raw(&y[..split]).into_data();
        for (a, b) in x.iter_mut().zip(self.pan_adjoint_raw(&y[split..]).data()) {
            *a += b;
        }
        x
    }

    /// `Phi` as a shareable matrix-free operator for tape graphs.
    pub fn operator(self: &Arc<Self>) -> Arc<dyn LinearOperator> {
        Arc::new(PhiOperator(Arc::clone(self)))
    }

    /// The CASSI branch `Phi_c` alone as a matrix-free operator.
    pub fn cassi_operator(self: &Arc<Self>) -> Arc<dyn LinearOperator> {
        Arc::new(CassiOperator(Arc::clone(self)))
    }

    /// Materializes `Phi` as a dense `M x N` row-major matrix by probing
    /// unit vectors. Only sensible for small instances.
    pub fn dense_matrix(&self) -> Tensor {
        let (m, n) = (self.measurement_len(), self.scene_len());
        let mut out = vec![0.0; m * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            for (i, v) in self.phi_apply_raw(&e).into_iter().enumerate() {
                out[i * n + j] = v;
            }
            e[j] = 0.0;
        }
        Tensor::new(&[m, n], out).expect("dense shape")
    }

    /// Noisy measurement pair for scene `x`.
    pub fn simulate(&self, x: &Tensor, noise: &NoiseModel) -> Result<MeasurementPair> {
        if noise.sigma_c < 0.0 || noise.sigma_p < 0.0 || !noise.sigma_c.is_finite() || !noise.sigma_p.is_finite() {
            return Err(Error::Config(format!(
                "noise sigmas must be non-negative, got {} / {}",
                noise.sigma_c, noise.sigma_p
            )));
        }
        let mut cassi = self.cassi_forward(x)?;
        let mut pan = self.pan_forward(x)?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
        for (t, sigma) in [(&mut cassi, noise.sigma_c), (&mut pan, noise.sigma_p)] {
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("sigma checked");
                for v in t.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
        }
        Ok(MeasurementPair {
            cassi,
            pan,
            noise_sigma_c: noise.sigma_c,
            noise_sigma_p: noise.sigma_p,
        })
    }
}

/// Translates band `c` by `c * d` along the dispersion axis into a
/// zero-padded canvas of shape `[H', W', C]`.
pub fn shift_cube(x: &Tensor, step: usize, direction: Direction) -> Result<Tensor> {
    let &[h, w, c] = x.shape() else {
        return Err(dim_err(format!("shift expects [H, W, C], got {:?}", x.shape())));
    };
    let spread = step * (c - 1);
    let (ch, cw) = match direction {
        Direction::Right => (h, w + spread),
        Direction::Up => (h + spread, w),
    };
    let mut out = Tensor::zeros(&[ch, cw, c]);
    for i in 0..h {
        for j in 0..w {
            for b in 0..c {
                let (ti, tj) = match direction {
                    Direction::Right => (i, j + b * step),
                    Direction::Up => (i + (c - 1 - b) * step, j),
                };
                out.set(&[ti, tj, b], x.at(&[i, j, b]));
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`shift_cube`]: gathers each band back out of the canvas.
pub fn unshift_cube(canvas: &Tensor, height: usize, width: usize, step: usize, direction: Direction) -> Result<Tensor> {
    let &[ch, cw, c] = canvas.shape() else {
        return Err(dim_err(format!(
            "unshift expects [H', W', C], got {:?}",
            canvas.shape()
        )));
    };
    let spread = step * (c - 1);
    let expected = match direction {
        Direction::Right => (height, width + spread),
        Direction::Up => (height + spread, width),
    };
    if (ch, cw) != expected {
        return Err(dim_err(format!(
            "canvas {:?} inconsistent with {height}x{width}, d={step}",
            canvas.shape()
        )));
    }
    let mut out = Tensor::zeros(&[height, width, c]);
    for i in 0..height {
        for j in 0..width {
            for b in 0..c {
                let (ti, tj) = match direction {
                    Direction::Right => (i, j + b * step),
                    Direction::Up => (i + (c - 1 - b) * step, j),
                };
                out.set(&[i, j, b], canvas.at(&[ti, tj, b]));
            }
        }
    }
    Ok(out)
}

struct PhiOperator(Arc<SensingSystem>);

impl LinearOperator for PhiOperator {
    fn input_shape(&self) -> Vec<usize> {
        self.0.cube_shape().to_vec()
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.0.measurement_len()]
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.phi_apply_raw(x)
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.0.phi_adjoint_raw(y)
    }

    fn macs(&self) -> u64 {
        2 * self.0.scene_len() as u64
    }
}

struct CassiOperator(Arc<SensingSystem>);

impl LinearOperator for CassiOperator {
    fn input_shape(&self) -> Vec<usize> {
        self.0.cube_shape().to_vec()
    }

    fn output_shape(&self) -> Vec<usize> {
        self.0.cassi_shape().to_vec()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.cassi_forward_raw(x).into_data()
    }

    fn adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.0.cassi_adjoint_raw(y).into_data()
    }

    fn macs(&self) -> u64 {
        self.0.scene_len() as u64
    }
}

/// Additive Gaussian noise on both branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_c: f64,
    pub sigma_p: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            sigma_c: 0.0,
            sigma_p: 0.0,
            seed: 0,
        }
    }
}

/// CASSI detector image and PAN image of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementPair {
    pub cassi: Tensor,
    pub pan: Tensor,
    pub noise_sigma_c: f64,
    pub noise_sigma_p: f64,
}

impl MeasurementPair {
    pub fn new(sys: &SensingSystem, cassi: Tensor, pan: Tensor) -> Result<Self> {
        sys.check_2d(&cassi, sys.cassi_shape(), "cassi measurement")?;
        sys.check_2d(&pan, [sys.height, sys.width], "pan image")?;
        Ok(Self {
            cassi,
            pan,
            noise_sigma_c: 0.0,
            noise_sigma_p: 0.0,
        })
    }

    /// `[y_c; y_p]` as one flat vector.
    pub fn stacked(&self) -> Tensor {
        let mut v = self.cassi.data().to_vec();
        v.extend_from_slice(self.pan.data());
        let n = v.len();
        Tensor::new(&[n], v).expect("length")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_cube(shape: [usize; 3], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shift_zero_step_is_identity() {
        let x = random_cube([3, 4, 5], 1);
        assert_eq!(shift_cube(&x, 0, Direction::Right).unwrap(), x);
        assert_eq!(shift_cube(&x, 0, Direction::Up).unwrap(), x);
    }

    #[test]
    fn shift_small_example() {
        // bands [a, b] and [p, q] on a 1x2 scene
        let (a, b, p, q) = (1.0, 2.0, 3.0, 4.0);
        let x = Tensor::new(&[1, 2, 2], vec![a, p, b, q]).unwrap();
        let s = shift_cube(&x, 1, Direction::Right).unwrap();
        let band = |c: usize| (0..3).map(|j| s.at(&[0, j, c])).collect::<Vec<_>>();
        assert_eq!(band(0), vec![a, b, 0.0]);
        assert_eq!(band(1), vec![0.0, p, q]);
    }

    #[test]
    fn shift_adjoint_identity() {
        for dir in [Direction::Right, Direction::Up] {
            let x = random_cube([5, 6, 4], 2);
            let y = random_cube(
                [
                    5 + if dir == Direction::Up { 6 } else { 0 },
                    6 + if dir == Direction::Right { 6 } else { 0 },
                    4,
                ],
                3,
            );
            let lhs = shift_cube(&x, 2, dir).unwrap().dot(&y);
            let rhs = x.dot(&unshift_cube(&y, 5, 6, 2, dir).unwrap());
            assert!((lhs - rhs).abs() <= 1e-12);
        }
    }

    #[test]
    fn cassi_single_band_ones_mask() {
        let sys = SensingSystem::new(CodedMask::constant(4, 5, 1.0).unwrap(), 3, Direction::Right, vec![1.0]).unwrap();
        let x = random_cube([4, 5, 1], 4);
        let y = sys.cassi_forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
        // C = 1, d = 0: the adjoint hands y back unchanged
        let sys0 = SensingSystem::new(CodedMask::constant(4, 5, 1.0).unwrap(), 0, Direction::Right, vec![1.0]).unwrap();
        let back = sys0.cassi_adjoint(&y).unwrap();
        assert_eq!(back.data(), y.data());
    }

    #[test]
    fn zero_mask_and_zero_measurement() {
        let sys = SensingSystem::new(
            CodedMask::constant(4, 4, 0.0).unwrap(),
            2,
            Direction::Right,
            vec![0.5, 0.5],
        )
        .unwrap();
        let x = random_cube([4, 4, 2], 5);
        assert!(sys.cassi_forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let y = Tensor::zeros(&sys.cassi_shape());
        assert!(sys.cassi_adjoint(&y).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(sys
            .pan_adjoint(&Tensor::zeros(&[4, 4]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(sys
            .phi_apply(&Tensor::zeros(&[4, 4, 2]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn pan_examples() {
        let sys = SensingSystem::simulation(4, 4, 4, 0);
        let x = Tensor::full(&[4, 4, 4], 0.3);
        let p = sys.pan_forward(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let one_hot = SensingSystem::new(
            CodedMask::bernoulli(4, 4, 1),
            2,
            Direction::Right,
            vec![0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let x = random_cube([4, 4, 4], 6);
        let p = one_hot.pan_forward(&x).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                assert_eq!(p.at(&[h, w]), x.at(&[h, w, 2]));
            }
        }
        // adjoint of a one-hot response places the image back in band 2 only
        let back = one_hot.pan_adjoint(&p).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                assert_eq!(back.at(&[h, w, 2]), p.at(&[h, w]));
                assert_eq!(back.at(&[h, w, 0]), 0.0);
            }
        }
    }

    #[test]
    fn measurement_dimensions() {
        let sys = SensingSystem::simulation(32, 32, 4, 0);
        assert_eq!(sys.measurement_len(), 2240);
        assert_eq!(sys.scene_len(), 4096);
        assert_eq!(sys.cassi_shape(), [32, 38]);
        let up = SensingSystem::real_hardware(32, 32, 4, 0);
        assert_eq!(up.cassi_shape(), [35, 32]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let sys = SensingSystem::simulation(4, 4, 2, 0);
        assert!(sys.phi_apply(&Tensor::zeros(&[4, 4, 3])).is_err());
        assert!(sys.phi_adjoint(&Tensor::zeros(&[7])).is_err());
        assert!(sys.cassi_forward(&Tensor::zeros(&[4, 5, 2])).is_err());
    }

    #[test]
    fn response_validation() {
        let m = CodedMask::bernoulli(2, 2, 0);
        assert!(SensingSystem::new(m.clone(), 1, Direction::Right, vec![0.5, 0.6]).is_err());
        assert!(SensingSystem::new(m.clone(), 1, Direction::Right, vec![1.5, -0.5]).is_err());
        assert!(SensingSystem::new_unnormalized(m, 1, Direction::Right, vec![0.0, 0.0]).is_ok());
    }

    #[test]
    fn simulate_noise_behaviour() {
        let sys = SensingSystem::simulation(8, 8, 4, 3);
        let x = random_cube([8, 8, 4], 7).map(f64::abs);
        let clean = sys.simulate(&x, &NoiseModel::noiseless()).unwrap();
        assert_eq!(clean.cassi, sys.cassi_forward(&x).unwrap());
        assert_eq!(clean.pan, sys.pan_forward(&x).unwrap());
        let noise = NoiseModel {
            sigma_c: 0.01,
            sigma_p: 0.02,
            seed: 11,
        };
        assert_eq!(sys.simulate(&x, &noise).unwrap(), sys.simulate(&x, &noise).unwrap());
        let bad = NoiseModel { sigma_c: -0.1, ..noise };
        assert!(matches!(sys.simulate(&x, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn bernoulli_mask_is_reproducible_and_binary() {
        let a = CodedMask::bernoulli(16, 16, 9);
        assert_eq!(a, CodedMask::bernoulli(16, 16, 9));
        assert!(a.transmission().data().iter().all(|&v| v == 0.0 || v == 1.0));
        let ones = a.transmission().data().iter().sum::<f64>();
        assert!(ones > 80.0 && ones < 176.0);
    }
}
