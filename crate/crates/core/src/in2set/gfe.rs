use super::flops::FlopBreakdown;
use super::{ArchConfig, LEVELS};
use crate::error::{dim_err, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// PAN feature maps at full, half and quarter resolution.
#[derive(Clone, Copy, Debug)]
pub struct GuidedPyramid {
    pub levels: [Var; LEVELS],
}

/// Guided feature extractor: three `3x3 conv + bias + gelu` blocks, the
/// second and third with stride 2.
#[derive(Clone, Debug)]
pub struct Gfe {
    arch: ArchConfig,
    convs: [(ParamId, ParamId); LEVELS],
}

impl Gfe {
    pub fn new(store: &mut ParamStore, init: &mut Init, prefix: &str, arch: &ArchConfig) -> Self {
        let convs = std::array::from_fn(|l| {
            let cin = if l == 0 { 1 } else { arch.guide_width(l - 1) };
            let cout = arch.guide_width(l);
            (
                store.add(format!("{prefix}.conv{l}.kernel"), init.conv(3, cin, cout)),
                store.add(format!("{prefix}.conv{l}.bias"), Tensor::zeros(&[cout])),
            )
        });
        Self {
            arch: arch.clone(),
            convs,
        }
    }

    /// `pan` is an `[H, W]` image.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, pan: Var) -> Result<GuidedPyramid> {
        let (h, w) = (self.arch.height, self.arch.width);
        if tape.shape(pan) != [h, w] {
            return Err(dim_err(format!(
                "GFE expects a [{h}, {w}] PAN image, got {:?}",
                tape.shape(pan)
            )));
        }
        let mut cur = tape.reshape(pan, &[h, w, 1])?;
        let mut levels = Vec::with_capacity(LEVELS);
        for (l, &(k, b)) in self.convs.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            let y = tape.conv2d(cur, p[k], stride, 1)?;
            let y = tape.add_broadcast(y, p[b])?;
            cur = tape.gelu(y)?;
            levels.push(cur);
        }
        Ok(GuidedPyramid {
            levels: levels.try_into().expect("three levels"),
        })
    }

    pub fn flops(&self) -> FlopBreakdown {
        super::flops::gfe_flops(&self.arch)
    }
}
