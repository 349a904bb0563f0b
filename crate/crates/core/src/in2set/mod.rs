//! PAN-guided transformer denoiser.
//!
//! A guided feature extractor turns the PAN image into a three-level pyramid.
//! The denoiser is a three-level U-shape of In2AB blocks; each block runs
//! channel self-attention and PAN-steered spatial attention side by side,
//! reweights the result per token by the cosine between PAN queries and HSI
//! keys, and finishes with a pointwise feed-forward layer.
//!
//! Level `l` has feature width `D * 2^l` (`D = C`), guide width half of
//! that, and `2^l` heads. The first and last blocks use local windows, the
//! inner three use the dilated grid.

mod attention;
mod block;
mod denoiser;
mod flops;
mod gfe;
mod window;

pub use attention::{channel_attention, crw, ffn, mha_c, mha_s, spatial_attention, AttnWeights};
pub use block::In2Ab;
pub use denoiser::Denoiser;
pub use flops::{denoiser_flops, gfe_flops, FlopBreakdown};
pub use gfe::{Gfe, GuidedPyramid};
pub use window::{WindowLayout, WindowMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEVELS: usize = 3;

/// Which attention branches are active. A disabled branch is replaced by its
/// value projection, so the block keeps its shape and residual wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub crw: bool,
    pub mha_c: bool,
    pub mha_s: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            crw: true,
            mha_c: true,
            mha_s: true,
        }
    }
}

impl Toggles {
    pub const BASELINE: Self = Self {
        crw: false,
        mha_c: false,
        mha_s: false,
    };

    /// The cumulative break-down variants: baseline, +CRW, +MHA-C, +MHA-S.
    pub fn breakdown() -> [(&'static str, Self); 4] {
        let b = Self::BASELINE;
        let crw = Self { crw: true, ..b };
        let c = Self { mha_c: true, ..crw };
        [
            ("baseline", b),
            ("+CRW", crw),
            ("+MHA-C", c),
            ("+MHA-S", Self::default()),
        ]
    }
}

fn default_window() -> usize {
    8
}

fn default_expansion() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
    #[serde(default)]
    pub toggles: Toggles,
}

impl ArchConfig {
    pub fn new(height: usize, width: usize, bands: usize) -> Self {
        Self {
            height,
            width,
            bands,
            window: default_window(),
            ffn_expansion: default_expansion(),
            toggles: Toggles::default(),
        }
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn with_toggles(mut self, toggles: Toggles) -> Self {
        self.toggles = toggles;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let span = 4 * self.window;
        if self.window == 0 || !self.height.is_multiple_of(span) || !self.width.is_multiple_of(span) {
            return Err(Error::Dimension(format!(
                "{}x{} is not divisible by 4 * window = {span}",
                self.height, self.width
            )));
        }
        if self.bands < 2 || !self.bands.is_multiple_of(2) {
            return Err(Error::Dimension(format!(
                "feature width D = C = {} must be even",
                self.bands
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("ffn_expansion must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_width(&self, level: usize) -> usize {
        self.bands << level
    }

    pub fn guide_width(&self, level: usize) -> usize {
        self.feature_width(level) / 2
    }

    pub fn heads(&self, level: usize) -> usize {
        1 << level
    }

    pub fn extent(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }

    pub fn layout(&self, level: usize, mode: WindowMode) -> Result<WindowLayout> {
        let (h, w) = self.extent(level);
        WindowLayout::new(h, w, self.window, mode)
    }
}
