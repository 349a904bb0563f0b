//! Seeded synthetic scenes: smooth Gaussian blobs, each with its own smooth
//! spectrum, over a dim sloped background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub const DEFAULT_BLOBS: usize = 6;

/// An `[H, W, C]` cube with values in `[0, 1]`.
pub fn blob_scene(height: usize, width: usize, bands: usize, seed: u64) -> Tensor {
    blob_scene_with(height, width, bands, DEFAULT_BLOBS, seed)
}

pub fn blob_scene_with(height: usize, width: usize, bands: usize, blobs: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = height.min(width) as f64;
    let c = bands as f64;
    struct Blob {
        y: f64,
        x: f64,
        inv2r2: f64,
        spectrum: Vec<f64>,
    }
    let list: Vec<Blob> = (0..blobs)
        .map(|_| {
            let r = side * rng.random_range(0.08..0.25);
            let amp = rng.random_range(0.3..1.0);
            let centre = rng.random_range(-0.2..1.2) * (c - 1.0).max(1.0);
            let spread = rng.random_range(0.3..1.0) * c;
            Blob {
                y: rng.random_range(0.0..height as f64),
                x: rng.random_range(0.0..width as f64),
                inv2r2: 1.0 / (2.0 * r * r),
                spectrum: (0..bands)
                    .map(|b| amp * (-((b as f64 - centre) / spread).powi(2)).exp())
                    .collect(),
            }
        })
        .collect();
    let (gy, gx) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let mut t = Tensor::zeros(&[height, width, bands]);
    let data = t.data_mut();
    for y in 0..height {
        for x in 0..width {
            let bg = 0.1 + 0.05 * (gy * y as f64 / height as f64 + gx * x as f64 / width as f64);
            let px = &mut data[(y * width + x) * bands..(y * width + x + 1) * bands];
            px.fill(bg);
            for b in &list {
                let d2 = (y as f64 - b.y).powi(2) + (x as f64 - b.x).powi(2);
                let w = (-d2 * b.inv2r2).exp();
                for (v, s) in px.iter_mut().zip(&b.spectrum) {
                    *v += w * s;
                }
            }
        }
    }
    let peak = t.data().iter().cloned().fold(0.0, f64::max);
    t.map(|v| (v / peak.max(1.0)).clamp(0.0, 1.0))
}
