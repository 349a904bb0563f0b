//! Raw slice kernels shared by the tape's forward and backward passes.

use crate::par;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Geometry of a batched product `[B,P,Q] x [B,Q,R]`, where either side may
/// have batch extent 1 and is then reused for every batch entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatMulDims {
    pub a_batch: usize,
    pub b_batch: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

impl MatMulDims {
    pub fn batch(&self) -> usize {
        self.a_batch.max(self.b_batch)
    }

    fn a_off(&self, i: usize) -> usize {
        if self.a_batch == 1 {
            0
        } else {
            i * self.p * self.q
        }
    }

    fn b_off(&self, i: usize) -> usize {
        if self.b_batch == 1 {
            0
        } else {
            i * self.q * self.r
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], d: MatMulDims) -> Vec<f64> {
    let MatMulDims { p, q, r, .. } = d;
    let mut out = vec![0.0; d.batch() * p * r];
    // one chunk per output row
    par::for_each_chunk(&mut out, r, |row, dst| {
        let i = row / p;
        let pi = row % p;
        let arow = &a[d.a_off(i) + pi * q..d.a_off(i) + (pi + 1) * q];
        let bm = &b[d.b_off(i)..d.b_off(i) + q * r];
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bm[k * r..(k + 1) * r];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// Gradient of the left operand: `dA = dC * B^T`, summed over batch when A is shared.
pub fn matmul_grad_a(grad: &[f64], b: &[f64], d: MatMulDims) -> Vec<f64> {
    let MatMulDims { p, q, r, .. } = d;
    let batch = d.batch();
    let per_batch = par::map_range(batch, |i| {
        let bm = &b[d.b_off(i)..d.b_off(i) + q * r];
        let g = &grad[i * p * r..(i + 1) * p * r];
        let mut da = vec![0.0; p * q];
        for pi in 0..p {
            let grow = &g[pi * r..(pi + 1) * r];
            for k in 0..q {
                da[pi * q + k] = dot(grow, &bm[k * r..(k + 1) * r]);
            }
        }
        da
    });
    reduce_batch(per_batch, d.a_batch, p * q)
}

/// Gradient of the right operand: `dB = A^T * dC`.
pub fn matmul_grad_b(grad: &[f64], a: &[f64], d: MatMulDims) -> Vec<f64> {
    let MatMulDims { p, q, r, .. } = d;
    let batch = d.batch();
    let per_batch = par::map_range(batch, |i| {
        let am = &a[d.a_off(i)..d.a_off(i) + p * q];
        let g = &grad[i * p * r..(i + 1) * p * r];
        let mut db = vec![0.0; q * r];
        for pi in 0..p {
            let grow = &g[pi * r..(pi + 1) * r];
            for k in 0..q {
                let av = am[pi * q + k];
                if av == 0.0 {
                    continue;
                }
                for (o, &gv) in db[k * r..(k + 1) * r].iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
        db
    });
    reduce_batch(per_batch, d.b_batch, q * r)
}

fn reduce_batch(parts: Vec<Vec<f64>>, target_batch: usize, block: usize) -> Vec<f64> {
    if target_batch == 1 {
        let mut acc = vec![0.0; block];
        for part in parts {
            for (a, v) in acc.iter_mut().zip(part) {
                *a += v;
            }
        }
        acc
    } else {
        parts.concat()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input coordinate touched by output `o` and kernel tap `t`, if inside.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Cross-correlation of `[H,W,Cin]` with `[k,k,Cin,Cout]`.
pub fn conv2d(x: &[f64], kernel: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![0.0; oh * ow * d.cout];
    par::for_each_chunk(&mut out, ow * d.cout, |oy, row| {
        for ky in 0..d.k {
            let Some(iy) = d.src(oy, ky, d.h) else { continue };
            for ox in 0..ow {
                let dst = &mut row[ox * d.cout..(ox + 1) * d.cout];
                for kx in 0..d.k {
                    let Some(ix) = d.src(ox, kx, d.w) else { continue };
                    let xin = &x[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                    let kbase = (ky * d.k + kx) * d.cin * d.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &kernel[kbase + ci * d.cout..kbase + (ci + 1) * d.cout];
                        for (o, &kv) in dst.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_grad_input(grad: &[f64], kernel: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut gx = vec![0.0; d.h * d.w * d.cin];
    par::for_each_chunk(&mut gx, d.w * d.cin, |iy, row| {
        for ky in 0..d.k {
            // oy * stride + ky - pad == iy
            let num = iy as isize + d.pad as isize - ky as isize;
            if num < 0 || num % d.stride as isize != 0 {
                continue;
            }
            let oy = (num / d.stride as isize) as usize;
            if oy >= oh {
                continue;
            }
            for ix in 0..d.w {
                let dst = &mut row[ix * d.cin..(ix + 1) * d.cin];
                for kx in 0..d.k {
                    let num = ix as isize + d.pad as isize - kx as isize;
                    if num < 0 || num % d.stride as isize != 0 {
                        continue;
                    }
                    let ox = (num / d.stride as isize) as usize;
                    if ox >= ow {
                        continue;
                    }
                    let g = &grad[(oy * ow + ox) * d.cout..(oy * ow + ox + 1) * d.cout];
                    let kbase = (ky * d.k + kx) * d.cin * d.cout;
                    for (ci, o) in dst.iter_mut().enumerate() {
                        *o += dot(g, &kernel[kbase + ci * d.cout..kbase + (ci + 1) * d.cout]);
                    }
                }
            }
        }
    });
    gx
}

pub fn conv2d_grad_kernel(grad: &[f64], x: &[f64], d: ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let block = d.cin * d.cout;
    let mut gk = vec![0.0; d.k * d.k * block];
    par::for_each_chunk(&mut gk, block, |tap, dst| {
        let (ky, kx) = (tap / d.k, tap % d.k);
        for oy in 0..oh {
            let Some(iy) = d.src(oy, ky, d.h) else { continue };
            for ox in 0..ow {
                let Some(ix) = d.src(ox, kx, d.w) else { continue };
                let xin = &x[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                let g = &grad[(oy * ow + ox) * d.cout..(oy * ow + ox + 1) * d.cout];
                for (ci, &xv) in xin.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, &gv) in dst[ci * d.cout..(ci + 1) * d.cout].iter_mut().zip(g) {
                        *o += xv * gv;
                    }
                }
            }
        }
    });
    gk
}

/// Geometry of a transposed convolution with kernel `k` and stride `s`:
/// output extent is `(in - 1) * s + k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTDims {
    pub fn out_h(&self) -> usize {
        (self.h - 1) * self.stride + self.k
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) * self.stride + self.k
    }

    /// Input coordinates feeding output `o` paired with the kernel tap used.
    fn sources(&self, o: usize, extent: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.k).filter_map(move |t| {
            if o < t || !(o - t).is_multiple_of(self.stride) {
                return None;
            }
            let i = (o - t) / self.stride;
            (i < extent).then_some((i, t))
        })
    }
}

pub fn conv_transpose2d(x: &[f64], kernel: &[f64], d: ConvTDims) -> Vec<f64> {
    let ow = d.out_w();
    let mut out = vec![0.0; d.out_h() * ow * d.cout];
    par::for_each_chunk(&mut out, ow * d.cout, |oy, row| {
        for (iy, ky) in d.sources(oy, d.h) {
            for ox in 0..ow {
                let dst = &mut row[ox * d.cout..(ox + 1) * d.cout];
                for (ix, kx) in d.sources(ox, d.w) {
                    let xin = &x[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                    let kbase = (ky * d.k + kx) * d.cin * d.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let krow = &kernel[kbase + ci * d.cout..kbase + (ci + 1) * d.cout];
                        for (o, &kv) in dst.iter_mut().zip(krow) {
                            *o += xv * kv;
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv_transpose2d_grad_input(grad: &[f64], kernel: &[f64], d: ConvTDims) -> Vec<f64> {
    let ow = d.out_w();
    let mut gx = vec![0.0; d.h * d.w * d.cin];
    par::for_each_chunk(&mut gx, d.w * d.cin, |iy, row| {
        for ky in 0..d.k {
            let oy = iy * d.stride + ky;
            for ix in 0..d.w {
                let dst = &mut row[ix * d.cin..(ix + 1) * d.cin];
                for kx in 0..d.k {
                    let ox = ix * d.stride + kx;
                    let g = &grad[(oy * ow + ox) * d.cout..(oy * ow + ox + 1) * d.cout];
                    let kbase = (ky * d.k + kx) * d.cin * d.cout;
                    for (ci, o) in dst.iter_mut().enumerate() {
                        *o += dot(g, &kernel[kbase + ci * d.cout..kbase + (ci + 1) * d.cout]);
                    }
                }
            }
        }
    });
    gx
}

pub fn conv_transpose2d_grad_kernel(grad: &[f64], x: &[f64], d: ConvTDims) -> Vec<f64> {
    let ow = d.out_w();
    let block = d.cin * d.cout;
    let mut gk = vec![0.0; d.k * d.k * block];
    par::for_each_chunk(&mut gk, block, |tap, dst| {
        let (ky, kx) = (tap / d.k, tap % d.k);
        for iy in 0..d.h {
            let oy = iy * d.stride + ky;
            for ix in 0..d.w {
                let ox = ix * d.stride + kx;
                let xin = &x[(iy * d.w + ix) * d.cin..(iy * d.w + ix + 1) * d.cin];
                let g = &grad[(oy * ow + ox) * d.cout..(oy * ow + ox + 1) * d.cout];
                for (ci, &xv) in xin.iter().enumerate() {
                    for (o, &gv) in dst[ci * d.cout..(ci + 1) * d.cout].iter_mut().zip(g) {
                        *o += xv * gv;
                    }
                }
            }
        }
    });
    gk
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    // y > 0
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}
