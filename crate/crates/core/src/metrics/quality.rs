use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(x: &Tensor, r: &Tensor) -> Result<()> {
    if x.shape() != r.shape() {
        return Err(dim_err(format!("metric on {:?} vs {:?}", x.shape(), r.shape())));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// PSNR over the whole array; identical inputs give `+inf`.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    same_shape(x, reference)?;
    let se: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(psnr_from_mse(se / x.numel() as f64, peak))
}

/// Splits `[H, W, C]` into `C` band images, or wraps an `[H, W]` image.
fn bands(t: &Tensor) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    match *t.shape() {
        [h, w] => Ok((h, w, vec![t.data().to_vec()])),
        [h, w, c] => Ok((
            h,
            w,
            (0..c)
                .map(|b| t.data().iter().skip(b).step_by(c).copied().collect())
                .collect(),
        )),
        _ => Err(dim_err(format!("expected an image or cube, got {:?}", t.shape()))),
    }
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable filtering keeping only fully covered positions.
fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = g.iter().enumerate().map(|(i, gv)| gv * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, gv)| gv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_band(x: &[f64], r: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    // images smaller than the window use the largest odd window that fits
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let g = gaussian_window(size);
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(x, h, w, &g);
    let mr = filter_valid(r, h, w, &g);
    let sxx = filter_valid(&prod(x, x), h, w, &g);
    let srr = filter_valid(&prod(r, r), h, w, &g);
    let sxr = filter_valid(&prod(x, r), h, w, &g);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = mx.len();
    (0..n)
        .map(|i| {
            let (a, b) = (mx[i], mr[i]);
            let vx = sxx[i] - a * a;
            let vr = srr[i] - b * b;
            let cov = sxr[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vr + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Per-band SSIM with an 11x11 Gaussian window (sigma 1.5) over fully
/// covered positions.
pub fn ssim_per_band(x: &Tensor, reference: &Tensor, peak: f64) -> Result<Vec<f64>> {
    same_shape(x, reference)?;
    let (h, w, bx) = bands(x)?;
    let (_, _, br) = bands(reference)?;
    Ok(bx.iter().zip(&br).map(|(a, b)| ssim_band(a, b, h, w, peak)).collect())
}

/// Band-averaged SSIM.
pub fn ssim(x: &Tensor, reference: &Tensor) -> Result<f64> {
    let per = ssim_per_band(x, reference, 1.0)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub band_psnr_db: Vec<f64>,
    pub band_ssim: Vec<f64>,
}

impl QualityReport {
    /// Scores `x` against `reference` with peak 1.
    pub fn evaluate(x: &Tensor, reference: &Tensor) -> Result<Self> {
        let psnr_db = psnr(x, reference, 1.0)?;
        let band_ssim = ssim_per_band(x, reference, 1.0)?;
        let (_, _, bx) = bands(x)?;
        let (_, _, br) = bands(reference)?;
        let band_psnr_db = bx
            .iter()
            .zip(&br)
            .map(|(a, b)| {
                let se: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
                psnr_from_mse(se / a.len() as f64, 1.0)
            })
            .collect();
        Ok(Self {
            psnr_db,
            ssim: band_ssim.iter().sum::<f64>() / band_ssim.len() as f64,
            band_psnr_db,
            band_ssim,
        })
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = format!("psnr_db={:.6}\nssim={:.6}\n", self.psnr_db, self.ssim);
        for (i, (p, q)) in self.band_psnr_db.iter().zip(&self.band_ssim).enumerate() {
            s.push_str(&format!("band{i}.psnr_db={p:.6}\nband{i}.ssim={q:.6}\n"));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("band,psnr_db,ssim\n");
        for (i, (p, q)) in self.band_psnr_db.iter().zip(&self.band_ssim).enumerate() {
            s.push_str(&format!("{i},{p:.6},{q:.6}\n"));
        }
        s.push_str(&format!("all,{:.6},{:.6}\n", self.psnr_db, self.ssim));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let r = Tensor::from_fn(&[4, 4, 2], |i| (i as f64) / 40.0);
        assert!((psnr(&r.map(|v| v + 0.1), &r, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&r, &r, 1.0).unwrap(), f64::INFINITY);
        let c = Tensor::full(&[16, 16, 2], 0.4);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }
}
