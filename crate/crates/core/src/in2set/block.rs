use std::sync::Arc;

use super::attention::{channel_attention, crw, ffn, spatial_attention};
use super::flops::FlopBreakdown;
use super::{ArchConfig, Toggles, WindowLayout, WindowMode};
use crate::error::{dim_err, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

const PROJ_STD: f64 = 0.02;

/// Intra- and inter-similarity attention block on an `[H,W,D]` map guided by
/// an `[H,W,D/2]` PAN feature map.
///
/// `Y = concat(X1, X2)` from the normalized input, `X' = X + reweight(Y)`,
/// `X'' = X' + FFN(LN(X'))`.
#[derive(Clone, Debug)]
pub struct In2Ab {
    layout: WindowLayout,
    width: usize,
    guide: usize,
    heads: usize,
    expansion: usize,
    toggles: Toggles,
    ids: Ids,
    part_x: Arc<[usize]>,
    part_g: Arc<[usize]>,
    unpart_x: Arc<[usize]>,
}

#[derive(Clone, Debug)]
struct Ids {
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    wv1: ParamId,
    wv2: ParamId,
    wv3: ParamId,
    /// `(wq1, wk1, p1)` when channel attention is on.
    chan: Option<(ParamId, ParamId, ParamId)>,
    wq2: Option<ParamId>,
    /// `(wk2, p2)` when spatial attention is on.
    spat: Option<(ParamId, ParamId)>,
    wk3: Option<ParamId>,
    ffn: (ParamId, ParamId),
}

/// Intermediate tensors of one block, exposed for inspection.
pub struct In2AbTrace {
    pub channel: Option<(Var, Var)>,
    pub spatial: Option<(Var, Var)>,
    pub intra: Var,
    pub output: Var,
}

impl In2Ab {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        prefix: &str,
        arch: &ArchConfig,
        level: usize,
        mode: WindowMode,
    ) -> Result<Self> {
        let layout = arch.layout(level, mode)?;
        let (d, c) = (arch.feature_width(level), arch.guide_width(level));
        let heads = arch.heads(level);
        let t = arch.toggles;
        let dh = c / heads;
        let mut add = |name: &str, v: Tensor| store.add(format!("{prefix}.{name}"), v);
        let ln1 = (
            add("ln1.gain", Tensor::ones(&[d])),
            add("ln1.bias", Tensor::zeros(&[d])),
        );
        let wv1 = add("wv1", init.trunc_normal(&[d, c], PROJ_STD));
        let chan = t.mha_c.then(|| {
            (
                add("wq1", init.trunc_normal(&[d, c], PROJ_STD)),
                add("wk1", init.trunc_normal(&[d, c], PROJ_STD)),
                add("p1", Tensor::zeros(&[heads, dh, dh])),
            )
        });
        let wv2 = add("wv2", init.trunc_normal(&[d, c], PROJ_STD));
        let wq2 = (t.mha_s || t.crw).then(|| add("wq2", init.trunc_normal(&[c, c], PROJ_STD)));
        let n = layout.tokens;
        let spat = t.mha_s.then(|| {
            (
                add("wk2", init.trunc_normal(&[c, c], PROJ_STD)),
                add("p2", Tensor::zeros(&[heads, n, n])),
            )
        });
        let wk3 = t.crw.then(|| add("wk3", init.trunc_normal(&[d, c], PROJ_STD)));
        let wv3 = add("wv3", init.trunc_normal(&[d, d], PROJ_STD));
        let ln2 = (
            add("ln2.gain", Tensor::ones(&[d])),
            add("ln2.bias", Tensor::zeros(&[d])),
        );
        let e = arch.ffn_expansion * d;
        let ffn = (
            add("ffn.w1", init.trunc_normal(&[d, e], PROJ_STD)),
            add("ffn.w2", init.trunc_normal(&[e, d], PROJ_STD)),
        );
        Ok(Self {
            part_x: layout.partition_index(d),
            part_g: layout.partition_index(c),
            unpart_x: layout.unpartition_index(d),
            layout,
            width: d,
            guide: c,
            heads,
            expansion: arch.ffn_expansion,
            toggles: t,
            ids: Ids {
                ln1,
                ln2,
                wv1,
                wv2,
                wv3,
                chan,
                wq2,
                spat,
                wk3,
                ffn,
            },
        })
    }

    pub fn layout(&self) -> &WindowLayout {
        &self.layout
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Zeroes the last projection of both residual branches, turning the
    /// block into the identity map.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        for id in [self.ids.wv3, self.ids.ffn.1] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, g: Var) -> Result<Var> {
        Ok(self.trace(tape, p, x, g)?.output)
    }

    /// Forward pass returning the attention maps and the intra output too.
    pub fn trace(&self, tape: &mut Tape, p: &Bound, x: Var, g: Var) -> Result<In2AbTrace> {
        let (d, c) = (self.width, self.guide);
        if tape.shape(x) != self.layout.map_shape(d) || tape.shape(g) != self.layout.map_shape(c) {
            return Err(dim_err(format!(
                "In2AB expects input {:?} and guide {:?}, got {:?} and {:?}",
                self.layout.map_shape(d),
                self.layout.map_shape(c),
                tape.shape(x),
                tape.shape(g)
            )));
        }
        let ids = &self.ids;
        let xn = tape.layer_norm(x, p[ids.ln1.0], p[ids.ln1.1])?;
        let xt = tape.gather(xn, self.part_x.clone(), &self.layout.token_shape(d))?;
        let gt = tape.gather(g, self.part_g.clone(), &self.layout.token_shape(c))?;

        let v1 = tape.linear(xt, p[ids.wv1])?;
        let mut channel = None;
        let x1 = match ids.chan {
            Some((wq, wk, pos)) => {
                let q = tape.linear(xt, p[wq])?;
                let k = tape.linear(xt, p[wk])?;
                let r = channel_attention(tape, q, k, v1, p[pos], self.heads)?;
                channel = Some(r);
                r.1
            }
            None => v1,
        };

        let v2 = tape.linear(xt, p[ids.wv2])?;
        let q2 = ids.wq2.map(|w| tape.linear(gt, p[w])).transpose()?;
        let mut spatial = None;
        let x2 = match (ids.spat, q2) {
            (Some((wk, pos)), Some(q2)) => {
                let k = tape.linear(gt, p[wk])?;
                let r = spatial_attention(tape, q2, k, v2, p[pos], self.heads)?;
                spatial = Some(r);
                r.1
            }
            _ => v2,
        };

        let intra = tape.concat_lastdim(x1, x2)?;
        let v3 = tape.linear(intra, p[ids.wv3])?;
        let inter = match (ids.wk3, q2) {
            (Some(wk3), Some(q2)) => {
                let k3 = tape.linear(intra, p[wk3])?;
                crw(tape, v3, q2, k3)?
            }
            _ => v3,
        };
        let r = tape.gather(inter, self.unpart_x.clone(), &self.layout.map_shape(d))?;
        let x1 = tape.add(x, r)?;

        let xn = tape.layer_norm(x1, p[ids.ln2.0], p[ids.ln2.1])?;
        let f = ffn(tape, xn, p[ids.ffn.0], p[ids.ffn.1])?;
        let output = tape.add(x1, f)?;
        Ok(In2AbTrace {
            channel,
            spatial,
            intra,
            output,
        })
    }

    /// Multiply-accumulates of one forward pass, mirroring the tape count.
    pub fn flops(&self) -> FlopBreakdown {
        let t = (self.layout.groups * self.layout.tokens) as u64;
        let (d, c) = (self.width as u64, self.guide as u64);
        let dh = c / self.heads as u64;
        let n = self.layout.tokens as u64;
        let tg = self.toggles;
        let mut f = FlopBreakdown::default();
        // wv1, wv2, wv3, ffn
        f.linear += t * (2 * d * c + d * d + 2 * d * d * self.expansion as u64);
        if tg.mha_c {
            f.linear += 2 * t * d * c;
            f.channel_attention += 2 * t * c * dh;
        }
        if tg.mha_s || tg.crw {
            f.linear += t * c * c;
        }
        if tg.mha_s {
            f.linear += t * c * c;
            f.spatial_attention += 2 * t * n * c;
        }
        if tg.crw {
            f.linear += t * d * c;
            f.cosine += 3 * t * c;
        }
        f
    }
}
