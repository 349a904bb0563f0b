//! Attention primitives on grouped tokens `[B, N, width]`.

use crate::error::{dim_err, Result};
use crate::tensor::{Tape, Var};

fn token_dims(tape: &Tape, t: Var, heads: usize) -> Result<(usize, usize, usize)> {
    let &[b, n, c] = tape.shape(t) else {
        return Err(dim_err(format!("expected [B, N, C] tokens, got {:?}", tape.shape(t))));
    };
    if heads == 0 || c % heads != 0 {
        return Err(dim_err(format!("{c} channels do not split into {heads} heads")));
    }
    Ok((b, n, c / heads))
}

/// `[B,N,h*dh] -> [B*h, N, dh]`.
fn heads_token_major(tape: &mut Tape, t: Var, heads: usize) -> Result<Var> {
    let (b, n, dh) = token_dims(tape, t, heads)?;
    if heads == 1 {
        return Ok(t);
    }
    let r = tape.reshape(t, &[b, n, heads, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b * heads, n, dh])
}

/// `[B,N,h*dh] -> [B*h, dh, N]`.
fn heads_channel_major(tape: &mut Tape, t: Var, heads: usize) -> Result<Var> {
    let (b, n, dh) = token_dims(tape, t, heads)?;
    let r = tape.reshape(t, &[b, n, heads, dh])?;
    let p = tape.permute(r, &[0, 2, 3, 1])?;
    tape.reshape(p, &[b * heads, dh, n])
}

/// Adds a per-head bias `[h, r, c]` to scores `[B*h, r, c]`.
fn add_position(tape: &mut Tape, scores: Var, pos: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(scores).to_vec();
    let want = [heads, s[1], s[2]];
    if tape.shape(pos) != want {
        return Err(dim_err(format!(
            "positional encoding {:?}, expected {want:?}",
            tape.shape(pos)
        )));
    }
    let r = tape.reshape(scores, &[s[0] / heads, heads, s[1], s[2]])?;
    let a = tape.add_broadcast(r, pos)?;
    tape.reshape(a, &s)
}

/// Multi-head attention across channels. `q, k, v` are `[B,N,C]`; each head
/// forms a `dh x dh` score matrix by contracting over the `N` tokens, scaled
/// by `1/sqrt(N)`. Returns `(attention [B*h,dh,dh], output [B,N,C])`.
pub fn channel_attention(tape: &mut Tape, q: Var, k: Var, v: Var, pos: Var, heads: usize) -> Result<(Var, Var)> {
    let (b, n, dh) = token_dims(tape, q, heads)?;
    for t in [k, v] {
        if tape.shape(t) != tape.shape(q) {
            return Err(dim_err(format!(
                "channel attention: {:?} vs {:?}",
                tape.shape(q),
                tape.shape(t)
            )));
        }
    }
    let qh = heads_channel_major(tape, q, heads)?;
    let kh = heads_token_major(tape, k, heads)?;
    let vh = heads_channel_major(tape, v, heads)?;
    let s = tape.matmul(qh, kh)?;
    let s = tape.scale(s, 1.0 / (n as f64).sqrt())?;
    let s = add_position(tape, s, pos, heads)?;
    let attn = tape.softmax_lastdim(s)?;
    let o = tape.matmul(attn, vh)?;
    let o = tape.reshape(o, &[b, heads, dh, n])?;
    let o = tape.permute(o, &[0, 3, 1, 2])?;
    let out = tape.reshape(o, &[b, n, heads * dh])?;
    Ok((attn, out))
}

/// Multi-head attention across the `N` tokens of each group with scores
/// scaled by `1/sqrt(dh)`. Returns `(attention [B*h,N,N], output [B,N,C])`.
pub fn spatial_attention(tape: &mut Tape, q: Var, k: Var, v: Var, pos: Var, heads: usize) -> Result<(Var, Var)> {
    let (b, n, dh) = token_dims(tape, q, heads)?;
    for t in [k, v] {
        if tape.shape(t) != tape.shape(q) {
            return Err(dim_err(format!(
                "spatial attention: {:?} vs {:?}",
                tape.shape(q),
                tape.shape(t)
            )));
        }
    }
    let qh = heads_token_major(tape, q, heads)?;
    let kh = heads_channel_major(tape, k, heads)?;
    let vh = heads_token_major(tape, v, heads)?;
    let s = tape.matmul(qh, kh)?;
    let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
    let s = add_position(tape, s, pos, heads)?;
    let attn = tape.softmax_lastdim(s)?;
    let o = tape.matmul(attn, vh)?;
    let out = if heads == 1 {
        o
    } else {
        let o = tape.reshape(o, &[b, heads, n, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        tape.reshape(o, &[b, n, heads * dh])?
    };
    Ok((attn, out))
}

/// Projection weights of one attention branch.
#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub pos: Var,
}

/// Channel self-attention of tokens `x`.
pub fn mha_c(tape: &mut Tape, x: Var, w: &AttnWeights, heads: usize) -> Result<Var> {
    let q = tape.linear(x, w.wq)?;
    let k = tape.linear(x, w.wk)?;
    let v = tape.linear(x, w.wv)?;
    Ok(channel_attention(tape, q, k, v, w.pos, heads)?.1)
}

/// Spatial cross-attention: queries and keys from guide tokens `g`, values
/// from `x`.
pub fn mha_s(tape: &mut Tape, x: Var, g: Var, w: &AttnWeights, heads: usize) -> Result<Var> {
    let q = tape.linear(g, w.wq)?;
    let k = tape.linear(g, w.wk)?;
    let v = tape.linear(x, w.wv)?;
    Ok(spatial_attention(tape, q, k, v, w.pos, heads)?.1)
}

/// Cosine reweighting: each token of `v3` is scaled by `cos(q2, k3)` of the
/// same token.
pub fn crw(tape: &mut Tape, v3: Var, q2: Var, k3: Var) -> Result<Var> {
    let c = tape.cosine_lastdim(q2, k3)?;
    tape.mul_lastdim(v3, c)
}

/// Pointwise feed-forward: `gelu(x w1) w2`.
pub fn ffn(tape: &mut Tape, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = tape.linear(x, w1)?;
    let h = tape.gelu(h)?;
    tape.linear(h, w2)
}
