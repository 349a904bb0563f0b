use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, ConvDims, ConvTDims, MatMulDims};
use super::{strides, Tensor};
use crate::error::{dim_err, Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// LayerNorm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower clamp on vector norms inside [`Tape::cosine_lastdim`].
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

/// A matrix-free linear map with an exact adjoint.
pub trait LinearOperator: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, y: &[f64]) -> Vec<f64>;
    /// Multiply-accumulates for one application.
    fn macs(&self) -> u64 {
        0
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddSuffix(usize, usize),
    ScaleBy(usize, usize),
    Scale(usize, f64),
    MulLast(usize, usize),
    MatMul(usize, usize, MatMulDims),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d(usize, usize, ConvDims),
    ConvT2d(usize, usize, ConvTDims),
    Cosine(usize, usize),
    Gelu(usize),
    Softplus(usize),
    Abs(usize),
    Gather(usize, Arc<[usize]>),
    Concat(usize, usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Linear {
        x: usize,
        op: Arc<dyn LinearOperator>,
        adjoint: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in execution order so that a single
/// reverse sweep yields gradients for every `requires_grad` leaf.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    record: bool,
    macs: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            record: true,
            macs: 0,
        }
    }

    /// A tape that computes values but keeps no gradient bookkeeping.
    pub fn inference() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by contraction ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Trainable input: gradients flow back to it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.record;
        self.push_raw(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).unwrap_or(0)].requires_grad
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::State(format!(
                "variable from tape {} used on tape {}",
                v.tape, self.id
            )));
        }
        Ok(v.id)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, id }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let rg = self.record && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(dim_err(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(a, b, what)?;
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, op(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "div", |x, y| x / y, Op::Div)
    }

    /// `a + b` where `b`'s shape equals a trailing part of `a`'s shape and is
    /// repeated over the remaining leading dimensions (bias vectors,
    /// positional encodings shared across windows).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err(format!(
                "add_broadcast: {sb:?} is not a trailing shape of {sa:?}"
            )));
        }
        let vb = self.nodes[bi].value.data();
        let n = vb.len();
        let va = &self.nodes[ai].value;
        let data = va.data().iter().enumerate().map(|(i, &x)| x + vb[i % n]).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::AddSuffix(ai, bi), &[ai, bi]))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ai, si) = (self.idx(a)?, self.idx(s)?);
        if self.nodes[si].value.numel() != 1 {
            return Err(dim_err(format!(
                "scale_by expects a one-element factor, got {:?}",
                self.nodes[si].value.shape()
            )));
        }
        let f = self.nodes[si].value.item();
        let out = self.nodes[ai].value.map(|x| x * f).to_f64();
        Ok(self.push(out, Op::ScaleBy(ai, si), &[ai, si]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(|x| x * c).to_f64();
        Ok(self.push(out, Op::Scale(ai, c), &[ai]))
    }

    /// `a[..., d] * s[..., 0]`: one factor per row broadcast along the last dim.
    pub fn mul_lastdim(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ai, si) = (self.idx(a)?, self.idx(s)?);
        let (sa, ss) = (self.nodes[ai].value.shape(), self.nodes[si].value.shape());
        if sa.is_empty() || ss.len() != sa.len() || ss[..ss.len() - 1] != sa[..sa.len() - 1] || ss[ss.len() - 1] != 1 {
            return Err(dim_err(format!("mul_lastdim: {sa:?} vs factor {ss:?}")));
        }
        let d = *sa.last().unwrap();
        let fs = self.nodes[si].value.data();
        let va = &self.nodes[ai].value;
        let data = va.data().iter().enumerate().map(|(i, &x)| x * fs[i / d]).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::MulLast(ai, si), &[ai, si]))
    }

    /// Batched matrix product of rank-2 or rank-3 operands. A batch extent of
    /// 1 (or a missing batch dim) is reused across the other operand's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (
            self.nodes[ai].value.shape().to_vec(),
            self.nodes[bi].value.shape().to_vec(),
        );
        let split = |s: &[usize]| -> Option<(usize, usize, usize)> {
            match *s {
                [p, q] => Some((1, p, q)),
                [b, p, q] => Some((b, p, q)),
                _ => None,
            }
        };
        let err = || dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        let (ab, p, q) = split(&sa).ok_or_else(err)?;
        let (bb, q2, r) = split(&sb).ok_or_else(err)?;
        if q != q2 || (ab != bb && ab != 1 && bb != 1) {
            return Err(err());
        }
        let dims = MatMulDims {
            a_batch: ab,
            b_batch: bb,
            p,
            q,
            r,
        };
        let data = kernels::matmul(self.nodes[ai].value.data(), self.nodes[bi].value.data(), dims);
        let shape = if sa.len() == 2 && sb.len() == 2 {
            vec![p, r]
        } else {
            vec![dims.batch(), p, r]
        };
        self.macs += (dims.batch() * p * q * r) as u64;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::MatMul(ai, bi, dims), &[ai, bi]))
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let va = &self.nodes[ai].value;
        if va.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let d = *va.shape().last().ok_or_else(|| dim_err("softmax of a scalar"))?;
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push(out, Op::Softmax(ai), &[ai]))
    }

    /// Normalizes over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let vx = &self.nodes[xi].value;
        let d = *vx.shape().last().ok_or_else(|| dim_err("layer_norm of a scalar"))?;
        for (name, i) in [("gain", gi), ("bias", bi)] {
            if self.nodes[i].value.shape() != [d] {
                return Err(dim_err(format!(
                    "layer_norm {name} {:?} does not match feature extent {d}",
                    self.nodes[i].value.shape()
                )));
            }
        }
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let rows = vx.numel() / d;
        let mut xhat = Vec::with_capacity(vx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(vx.numel());
        for row in vx.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        let op = if self.record {
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                rstd,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(out, op, &[xi, gi, bi]))
    }

    /// 2-D cross-correlation of an `[H,W,Cin]` map with a `[k,k,Cin,Cout]` kernel.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let (sx, sk) = (self.nodes[xi].value.shape(), self.nodes[ki].value.shape());
        let (&[h, w, cin], &[k, k2, kcin, cout]) = (sx, sk) else {
            return Err(dim_err(format!("conv2d: input {sx:?}, kernel {sk:?}")));
        };
        if k != k2 || kcin != cin || k % 2 == 0 || stride == 0 {
            return Err(dim_err(format!("conv2d: input {sx:?}, kernel {sk:?}, stride {stride}")));
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(dim_err(format!(
                "conv2d: input {sx:?} with padding {padding} is smaller than kernel {k}"
            )));
        }
        let dims = ConvDims {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad: padding,
        };
        let data = kernels::conv2d(self.nodes[xi].value.data(), self.nodes[ki].value.data(), dims);
        self.macs += (dims.out_h() * dims.out_w() * k * k * cin * cout) as u64;
        let out = Tensor::new(&[dims.out_h(), dims.out_w(), cout], data)?;
        Ok(self.push(out, Op::Conv2d(xi, ki, dims), &[xi, ki]))
    }

    /// Strided transposed convolution (learned upsampling). Output extent is
    /// `(H-1)*stride + k`; `k == stride` gives an exact `stride`-fold upsample.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(kernel)?);
        let (sx, sk) = (self.nodes[xi].value.shape(), self.nodes[ki].value.shape());
        let (&[h, w, cin], &[k, k2, kcin, cout]) = (sx, sk) else {
            return Err(dim_err(format!("conv_transpose2d: input {sx:?}, kernel {sk:?}")));
        };
        if k != k2 || kcin != cin || stride == 0 {
            return Err(dim_err(format!(
                "conv_transpose2d: input {sx:?}, kernel {sk:?}, stride {stride}"
            )));
        }
        let dims = ConvTDims {
            h,
            w,
            cin,
            cout,
            k,
            stride,
        };
        let data = kernels::conv_transpose2d(self.nodes[xi].value.data(), self.nodes[ki].value.data(), dims);
        self.macs += (h * w * k * k * cin * cout) as u64;
        let out = Tensor::new(&[dims.out_h(), dims.out_w(), cout], data)?;
        Ok(self.push(out, Op::ConvT2d(xi, ki, dims), &[xi, ki]))
    }

    /// Cosine similarity along the last dimension, `[..., D] -> [..., 1]`.
    /// Norms are clamped below by [`COSINE_EPS`].
    pub fn cosine_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(ai, bi, "cosine_lastdim")?;
        let va = &self.nodes[ai].value;
        let vb = &self.nodes[bi].value;
        let d = *va.shape().last().ok_or_else(|| dim_err("cosine of scalars"))?;
        let data: Vec<f64> = va
            .data()
            .chunks(d)
            .zip(vb.data().chunks(d))
            .map(|(x, y)| {
                let na = kernels::dot(x, x).sqrt().max(COSINE_EPS);
                let nb = kernels::dot(y, y).sqrt().max(COSINE_EPS);
                (kernels::dot(x, y) / (na * nb)).clamp(-1.0, 1.0)
            })
            .collect();
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        self.macs += (3 * va.numel()) as u64;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Cosine(ai, bi), &[ai, bi]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.map(f).to_f64();
        Ok(self.push(out, op(ai), &[ai]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::gelu, Op::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, kernels::softplus, Op::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let out = self.nodes[ai].value.reshape(shape)?.to_f64();
        Ok(self.push(out, Op::Reshape(ai), &[ai]))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let ai = self.idx(a)?;
        let va = &self.nodes[ai].value;
        if shape.iter().product::<usize>() != index.len() {
            return Err(dim_err(format!("gather: {} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= va.numel()) {
            return Err(dim_err(format!(
                "gather: index {bad} out of range for {:?}",
                va.shape()
            )));
        }
        let data = index.iter().map(|&i| va.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Gather(ai, index), &[ai]))
    }

    /// Reorders dimensions: output dim `i` is input dim `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let index = permute_index(&shape, perm)?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        self.gather(a, index.into(), &out_shape)
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n < 2 {
            return Err(dim_err("transpose needs at least two dimensions"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        self.permute(a, &perm)
    }

    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err(format!("concat_lastdim: {sa:?} and {sb:?}")));
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = da + db;
        let va = self.nodes[ai].value.data();
        let vb = self.nodes[bi].value.data();
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for (x, y) in va.chunks(da).zip(vb.chunks(db)) {
            data.extend_from_slice(x);
            data.extend_from_slice(y);
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Concat(ai, bi), &[ai, bi]))
    }

    /// Selects `len` channels starting at `start` along the last dimension.
    pub fn narrow_lastdim(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| dim_err("narrow of a scalar"))?;
        if start + len > d || len == 0 {
            return Err(dim_err(format!("narrow [{start}, {}) of extent {d}", start + len)));
        }
        let rows = shape.iter().product::<usize>() / d;
        let index: Vec<usize> = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| r * d + c))
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        self.gather(a, index.into(), &out_shape)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let s = self.nodes[ai].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ai), &[ai]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = &self.nodes[ai].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(ai), &[ai]))
    }

    /// `<a, b>` as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        self.sum(m)
    }

    /// `x[..., Din] @ w[Din, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (&din, [wi, dout]) = (sx.last().ok_or_else(|| dim_err("linear of a scalar"))?, sw.as_slice()) else {
            return Err(dim_err(format!("linear: weight must be 2-D, got {sw:?}")));
        };
        if din != *wi {
            return Err(dim_err(format!("linear: input {sx:?} vs weight {sw:?}")));
        }
        let rows = sx.iter().product::<usize>() / din;
        let flat = self.reshape(x, &[rows, din])?;
        let y = self.matmul(flat, w)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = *dout;
        self.reshape(y, &out_shape)
    }

    /// Applies a matrix-free operator (or its adjoint) to `x`.
    pub fn apply_linear(&mut self, x: Var, op: Arc<dyn LinearOperator>, adjoint: bool) -> Result<Var> {
        let xi = self.idx(x)?;
        let (ins, outs) = if adjoint {
            (op.output_shape(), op.input_shape())
        } else {
            (op.input_shape(), op.output_shape())
        };
        let vx = &self.nodes[xi].value;
        if vx.numel() != ins.iter().product::<usize>() {
            return Err(dim_err(format!(
                "linear operator expects {ins:?}, got {:?}",
                vx.shape()
            )));
        }
        let data = if adjoint {
            op.adjoint(vx.data())
        } else {
            op.apply(vx.data())
        };
        self.macs += op.macs();
        let out = Tensor::new(&outs, data)?;
        Ok(self.push(out, Op::Linear { x: xi, op, adjoint }, &[xi]))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.numel() != 1 {
            return Err(dim_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[li].value.shape()
            )));
        }
        if !self.nodes[li].requires_grad {
            return Err(Error::State(
                "backward on a value with no recorded path to a trainable leaf".into(),
            ));
        }
        let Tape { id, nodes, .. } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            propagate(&nodes, i, &g, &mut grads);
        }
        let grads = nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    Some(g.unwrap_or_else(|| vec![0.0; n.value.numel()]))
                } else {
                    None
                }
            })
            .collect();
        let shapes = nodes.into_iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            tape: id,
            grads,
            shapes,
        })
    }
}

fn permute_index(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let n = shape.len();
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(dim_err(format!("invalid permutation {perm:?} for {shape:?}")));
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let total: usize = shape.iter().product();
    let mut index = Vec::with_capacity(total);
    let mut counter = vec![0usize; n];
    for _ in 0..total {
        index.push(counter.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum());
        for d in (0..n).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok(index)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, contrib: Vec<f64>) {
    match &mut grads[i] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let rg = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| nodes[j].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.to_vec());
            }
            if rg(b) {
                accumulate(grads, b, g.to_vec());
            }
        }
        &Op::Sub(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.to_vec());
            }
            if rg(b) {
                accumulate(grads, b, g.iter().map(|v| -v).collect());
            }
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
            }
            if rg(b) {
                accumulate(grads, b, g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
            }
        }
        &Op::Div(a, b) => {
            let (va, vb) = (val(a), val(b));
            if rg(a) {
                accumulate(grads, a, g.iter().zip(vb).map(|(x, y)| x / y).collect());
            }
            if rg(b) {
                let c = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(x, (p, q))| -x * p / (q * q))
                    .collect();
                accumulate(grads, b, c);
            }
        }
        &Op::AddSuffix(a, b) => {
            if rg(a) {
                accumulate(grads, a, g.to_vec());
            }
            if rg(b) {
                let n = nodes[b].value.numel();
                let mut gb = vec![0.0; n];
                for (k, &v) in g.iter().enumerate() {
                    gb[k % n] += v;
                }
                accumulate(grads, b, gb);
            }
        }
        &Op::ScaleBy(a, s) => {
            let f = val(s)[0];
            if rg(a) {
                accumulate(grads, a, g.iter().map(|v| v * f).collect());
            }
            if rg(s) {
                accumulate(grads, s, vec![kernels::dot(g, val(a))]);
            }
        }
        &Op::Scale(a, c) => accumulate(grads, a, g.iter().map(|v| v * c).collect()),
        &Op::MulLast(a, s) => {
            let d = *nodes[a].value.shape().last().unwrap();
            let fs = val(s);
            if rg(a) {
                accumulate(grads, a, g.iter().enumerate().map(|(k, v)| v * fs[k / d]).collect());
            }
            if rg(s) {
                let gs = g
                    .chunks(d)
                    .zip(val(a).chunks(d))
                    .map(|(x, y)| kernels::dot(x, y))
                    .collect();
                accumulate(grads, s, gs);
            }
        }
        &Op::MatMul(a, b, dims) => {
            if rg(a) {
                accumulate(grads, a, kernels::matmul_grad_a(g, val(b), dims));
            }
            if rg(b) {
                accumulate(grads, b, kernels::matmul_grad_b(g, val(a), dims));
            }
        }
        &Op::Softmax(a) => {
            let y = nodes[i].value.data();
            let d = *nodes[i].value.shape().last().unwrap();
            let mut ga = Vec::with_capacity(y.len());
            for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                let s = kernels::dot(yr, gr);
                ga.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - s)));
            }
            accumulate(grads, a, ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = nodes[*gain].value.numel();
            let gv = val(*gain);
            if rg(*gain) {
                let mut gg = vec![0.0; d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
                accumulate(grads, *gain, gg);
            }
            if rg(*bias) {
                let mut gb = vec![0.0; d];
                for gr in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += gr[j];
                    }
                }
                accumulate(grads, *bias, gb);
            }
            if rg(*x) {
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, hr), &rs) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let m1 = gh.iter().sum::<f64>() / d as f64;
                    let m2 = kernels::dot(&gh, hr) / d as f64;
                    gx.extend(gh.iter().zip(hr).map(|(a, h)| rs * (a - m1 - h * m2)));
                }
                accumulate(grads, *x, gx);
            }
        }
        &Op::Conv2d(x, k, dims) => {
            if rg(x) {
                accumulate(grads, x, kernels::conv2d_grad_input(g, val(k), dims));
            }
            if rg(k) {
                accumulate(grads, k, kernels::conv2d_grad_kernel(g, val(x), dims));
            }
        }
        &Op::ConvT2d(x, k, dims) => {
            if rg(x) {
                accumulate(grads, x, kernels::conv_transpose2d_grad_input(g, val(k), dims));
            }
            if rg(k) {
                accumulate(grads, k, kernels::conv_transpose2d_grad_kernel(g, val(x), dims));
            }
        }
        &Op::Cosine(a, b) => {
            let d = *nodes[a].value.shape().last().unwrap();
            let (va, vb) = (val(a), val(b));
            let mut ga = Vec::with_capacity(va.len());
            let mut gb = Vec::with_capacity(vb.len());
            for ((x, y), &gr) in va.chunks(d).zip(vb.chunks(d)).zip(g) {
                let (ra, rb) = (kernels::dot(x, x).sqrt(), kernels::dot(y, y).sqrt());
                let (na, nb) = (ra.max(COSINE_EPS), rb.max(COSINE_EPS));
                let c = kernels::dot(x, y) / (na * nb);
                let ca = if ra > COSINE_EPS { c / (ra * ra) } else { 0.0 };
                let cb = if rb > COSINE_EPS { c / (rb * rb) } else { 0.0 };
                for j in 0..d {
                    ga.push(gr * (y[j] / (na * nb) - ca * x[j]));
                    gb.push(gr * (x[j] / (na * nb) - cb * y[j]));
                }
            }
            if rg(a) {
                accumulate(grads, a, ga);
            }
            if rg(b) {
                accumulate(grads, b, gb);
            }
        }
        &Op::Gelu(a) => accumulate(
            grads,
            a,
            g.iter()
                .zip(val(a))
                .map(|(gv, &x)| gv * kernels::gelu_grad(x))
                .collect(),
        ),
        &Op::Softplus(a) => accumulate(
            grads,
            a,
            g.iter().zip(val(a)).map(|(gv, &x)| gv * kernels::sigmoid(x)).collect(),
        ),
        &Op::Abs(a) => accumulate(
            grads,
            a,
            g.iter()
                .zip(val(a))
                .map(|(gv, &x)| {
                    if x > 0.0 {
                        *gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })
                .collect(),
        ),
        Op::Gather(a, index) => {
            let mut ga = vec![0.0; nodes[*a].value.numel()];
            for (&src, &gv) in index.iter().zip(g) {
                ga[src] += gv;
            }
            accumulate(grads, *a, ga);
        }
        &Op::Concat(a, b) => {
            let da = *nodes[a].value.shape().last().unwrap();
            let db = *nodes[b].value.shape().last().unwrap();
            let mut ga = Vec::with_capacity(nodes[a].value.numel());
            let mut gb = Vec::with_capacity(nodes[b].value.numel());
            for row in g.chunks(da + db) {
                ga.extend_from_slice(&row[..da]);
                gb.extend_from_slice(&row[da..]);
            }
            if rg(a) {
                accumulate(grads, a, ga);
            }
            if rg(b) {
                accumulate(grads, b, gb);
            }
        }
        &Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
        &Op::Sum(a) => accumulate(grads, a, vec![g[0]; nodes[a].value.numel()]),
        &Op::Mean(a) => {
            let n = nodes[a].value.numel();
            accumulate(grads, a, vec![g[0] / n as f64; n]);
        }
        Op::Linear { x, op, adjoint } => {
            let gx = if *adjoint { op.apply(g) } else { op.adjoint(g) };
            accumulate(grads, *x, gx);
        }
    }
}

/// Gradients of every trainable leaf, produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        let g = self.grads.get(v.id)?.as_ref()?;
        Tensor::new(&self.shapes[v.id], g.clone()).ok()
    }

    pub(crate) fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id)?.take()
    }
}
