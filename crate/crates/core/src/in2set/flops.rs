use std::ops::{Add, AddAssign};

use super::{ArchConfig, LEVELS};

/// Multiply-accumulate counts of one forward pass, by kind of work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub conv: u64,
    pub linear: u64,
    pub channel_attention: u64,
    pub spatial_attention: u64,
    pub cosine: u64,
    pub operator: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.channel_attention + self.spatial_attention + self.cosine + self.operator
    }

    pub fn scaled(self, k: u64) -> Self {
        Self {
            conv: self.conv * k,
            linear: self.linear * k,
            channel_attention: self.channel_attention * k,
            spatial_attention: self.spatial_attention * k,
            cosine: self.cosine * k,
            operator: self.operator * k,
        }
    }
}

impl Add for FlopBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            conv: self.conv + o.conv,
            linear: self.linear + o.linear,
            channel_attention: self.channel_attention + o.channel_attention,
            spatial_attention: self.spatial_attention + o.spatial_attention,
            cosine: self.cosine + o.cosine,
            operator: self.operator + o.operator,
        }
    }
}

impl AddAssign for FlopBreakdown {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn conv(h: usize, w: usize, k: usize, cin: usize, cout: usize) -> u64 {
    (h * w * k * k * cin * cout) as u64
}

pub fn gfe_flops(arch: &ArchConfig) -> FlopBreakdown {
    let mut f = FlopBreakdown::default();
    for l in 0..LEVELS {
        let (h, w) = arch.extent(l);
        let cin = if l == 0 { 1 } else { arch.guide_width(l - 1) };
        f.conv += conv(h, w, 3, cin, arch.guide_width(l));
    }
    f
}

/// Convolutions and fusions of the U-shape, excluding the In2AB blocks.
pub(super) fn skeleton_flops(arch: &ArchConfig) -> FlopBreakdown {
    let (h, w) = (arch.height, arch.width);
    let d = arch.feature_width(0);
    let mut f = FlopBreakdown::default();
    f.conv += conv(h, w, 3, arch.bands + 1, d);
    f.conv += conv(h, w, 3, d, arch.bands);
    for l in 1..LEVELS {
        let (hl, wl) = arch.extent(l);
        let (lo, hi) = (arch.feature_width(l - 1), arch.feature_width(l));
        // stride-2 down conv, 2x2 transposed conv back up, 1x1 skip fusion
        f.conv += conv(hl, wl, 3, lo, hi);
        f.conv += conv(hl, wl, 2, hi, lo);
        f.linear += ((h >> (l - 1)) * (w >> (l - 1)) * 2 * lo * lo) as u64;
    }
    f
}

/// Full denoiser count for `arch`, built from the same blocks the model uses.
pub fn denoiser_flops(arch: &ArchConfig) -> crate::Result<FlopBreakdown> {
    let mut store = crate::params::ParamStore::new();
    let mut init = crate::params::Init::new(0);
    let d = super::Denoiser::new(&mut store, &mut init, "probe", arch)?;
    Ok(d.flops())
}
