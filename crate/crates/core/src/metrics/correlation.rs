use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::par;
use crate::tensor::Tensor;

/// How pixel descriptors are formed before window-local cosine similarity.
///
/// The default compares like with like: both modalities use 3x3 patches
/// (spectral for the cube, scalar for the PAN image), centred on the window
/// mean so that cosines measure co-variation rather than shared brightness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationConfig {
    /// Side of the non-overlapping windows.
    pub window: usize,
    /// Patch side for HSI descriptors; 1 is the plain spectral vector.
    pub hsi_patch: usize,
    /// Patch side for PAN descriptors.
    pub pan_patch: usize,
    /// Subtract the window-mean descriptor before taking cosines.
    pub center: bool,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            window: 8,
            hsi_patch: 3,
            pan_patch: 3,
            center: true,
        }
    }
}

/// Descriptor of every pixel: the `patch x patch x C` neighbourhood with
/// borders clamped, flattened.
fn descriptors(src: &Tensor, patch: usize) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (h, w, c) = match *src.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(dim_err(format!("expected an image or cube, got {:?}", src.shape()))),
    };
    if patch == 0 || patch.is_multiple_of(2) {
        return Err(dim_err(format!("descriptor patch side {patch} must be odd")));
    }
    let r = (patch / 2) as isize;
    let len = patch * patch * c;
    let mut out = Vec::with_capacity(h * w * len);
    let d = src.data();
    for y in 0..h as isize {
        for x in 0..w as isize {
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    out.extend_from_slice(&d[(yy * w + xx) * c..(yy * w + xx + 1) * c]);
                }
            }
        }
    }
    Ok((h, w, len, out))
}

/// Window-local cosine similarity matrices `[B, N, N]` between pixel
/// descriptors; windows are row-major and tokens row-major within a window.
pub fn correlation_map(src: &Tensor, window: usize, patch: usize, center: bool) -> Result<Tensor> {
    let (h, w, len, desc) = descriptors(src, patch)?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(dim_err(format!(
            "{h}x{w} is not divisible into {window}x{window} windows"
        )));
    }
    let (gh, gw) = (h / window, w / window);
    let n = window * window;
    let maps = par::map_range(gh * gw, |b| {
        let (wy, wx) = (b / gw, b % gw);
        let mut v: Vec<Vec<f64>> = (0..n)
            .map(|t| {
                let (y, x) = (wy * window + t / window, wx * window + t % window);
                desc[(y * w + x) * len..(y * w + x + 1) * len].to_vec()
            })
            .collect();
        if center {
            let mut mean = vec![0.0; len];
            for d in &v {
                for (m, x) in mean.iter_mut().zip(d) {
                    *m += x / n as f64;
                }
            }
            for d in &mut v {
                for (x, m) in d.iter_mut().zip(&mean) {
                    *x -= m;
                }
            }
        }
        let norms: Vec<f64> = v.iter().map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
            for j in i + 1..n {
                let c = if norms[i] < 1e-12 && norms[j] < 1e-12 {
                    // two empty descriptors are indistinguishable
                    1.0
                } else {
                    let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
                    (dot / (norms[i].max(1e-12) * norms[j].max(1e-12))).clamp(-1.0, 1.0)
                };
                m[i * n + j] = c;
                m[j * n + i] = c;
            }
        }
        m
    });
    Tensor::new(&[gh * gw, n, n], maps.concat())
}

/// Agreement between the HSI- and PAN-derived correlation maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrProxyReport {
    pub rmse: f64,
    /// Pearson correlation of the off-diagonal entries.
    pub correlation: f64,
    pub psnr_db: f64,
}

impl CorrProxyReport {
    pub fn to_kv(&self) -> String {
        format!(
            "rmse={:.6}\ncorrelation={:.6}\npsnr_db={:.6}\n",
            self.rmse, self.correlation, self.psnr_db
        )
    }

    pub const CSV_HEADER: &'static str = "scene,rmse,correlation,psnr_db";

    pub fn csv_row(&self, scene: &str) -> String {
        format!("{scene},{:.6},{:.6},{:.6}", self.rmse, self.correlation, self.psnr_db)
    }
}

/// Compares the correlation maps of `hsi` (`[H,W,C]`) and `pan` (`[H,W]`).
/// PSNR uses the cosine range 2 as peak.
pub fn proxy_compare(hsi: &Tensor, pan: &Tensor, cfg: &CorrelationConfig) -> Result<CorrProxyReport> {
    if hsi.shape().len() != 3 || pan.shape() != &hsi.shape()[..2] {
        return Err(dim_err(format!(
            "hsi {:?} and pan {:?} disagree",
            hsi.shape(),
            pan.shape()
        )));
    }
    let a = correlation_map(hsi, cfg.window, cfg.hsi_patch, cfg.center)?;
    let b = correlation_map(pan, cfg.window, cfg.pan_patch, cfg.center)?;
    let n = a.shape()[1];
    let pairs: Vec<(f64, f64)> = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .filter(|(i, _)| (i % (n * n)) / n != i % n)
        .map(|(_, (x, y))| (*x, *y))
        .collect();
    let m = pairs.len() as f64;
    let mse = pairs.iter().map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m;
    let (mx, my) = (
        pairs.iter().map(|p| p.0).sum::<f64>() / m,
        pairs.iter().map(|p| p.1).sum::<f64>() / m,
    );
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in &pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    let correlation = if sxx == 0.0 && syy == 0.0 {
        1.0
    } else {
        sxy / (sxx.sqrt() * syy.sqrt()).max(f64::MIN_POSITIVE)
    };
    Ok(CorrProxyReport {
        rmse: mse.sqrt(),
        correlation,
        psnr_db: if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (4.0 / mse).log10()
        },
    })
}
