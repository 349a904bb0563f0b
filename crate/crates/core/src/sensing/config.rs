use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CodedMask, Direction, SensingSystem};
use crate::error::{Error, Result};
use crate::io;

/// Text-serializable description of a [`SensingSystem`].
///
/// ```toml
/// height = 32
/// width = 32
/// bands = 8
/// step = 2
/// direction = "right"
/// mask_seed = 7          # or: mask_file = "mask.dct"
/// pan_response = [ ... ] # optional, uniform when absent
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    #[serde(default = "default_step")]
    pub step: usize,
    #[serde(default = "default_direction")]
    pub direction: Direction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pan_response: Option<Vec<f64>>,
}

fn default_step() -> usize {
    2
}

fn default_direction() -> Direction {
    Direction::Right
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Seed(u64),
    File(String),
}

impl SensingConfig {
    /// Simulation preset (`d = 2`, right) with a seeded mask.
    pub fn simulation(height: usize, width: usize, bands: usize, mask_seed: u64) -> Self {
        Self {
            height,
            width,
            bands,
            step: 2,
            direction: Direction::Right,
            mask_seed: Some(mask_seed),
            mask_file: None,
            pan_response: None,
        }
    }

    pub fn mask_source(&self) -> Result<MaskSource> {
        match (&self.mask_seed, &self.mask_file) {
            (Some(s), None) => Ok(MaskSource::Seed(*s)),
            (None, Some(f)) => Ok(MaskSource::File(f.clone())),
            (None, None) => Ok(MaskSource::Seed(0)),
            (Some(_), Some(_)) => Err(Error::Config(
                "sensing: give either mask_seed or mask_file, not both".into(),
            )),
        }
    }

    /// Builds the system; relative mask paths resolve against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<SensingSystem> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Config("sensing: extents must be positive".into()));
        }
        let mask = match self.mask_source()? {
            MaskSource::Seed(s) => CodedMask::bernoulli(self.height, self.width, s),
            MaskSource::File(f) => {
                let t = io::load_tensor(base_dir.join(f))?;
                if t.shape() != [self.height, self.width] {
                    return Err(Error::Config(format!(
                        "mask file has shape {:?}, expected [{}, {}]",
                        t.shape(),
                        self.height,
                        self.width
                    )));
                }
                CodedMask::from_tensor(t.to_f64())?
            }
        };
        let response = self
            .pan_response
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.bands as f64; self.bands]);
        if response.len() != self.bands {
            return Err(Error::Config(format!(
                "pan_response has {} weights for {} bands",
                response.len(),
                self.bands
            )));
        }
        SensingSystem::new(mask, self.step, self.direction, response)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sensing config serializes")
    }
}

impl SensingSystem {
    /// Config describing this system. A seeded mask is recorded by seed;
    /// otherwise the caller must store the mask and pass its path.
    pub fn to_config(&self, mask_file: Option<&str>) -> SensingConfig {
        SensingConfig {
            height: self.height,
            width: self.width,
            bands: self.bands,
            step: self.step,
            direction: self.direction,
            mask_seed: if mask_file.is_none() { self.mask.seed() } else { None },
            mask_file: mask_file.map(str::to_owned),
            pan_response: Some(self.pan_response.clone()),
        }
    }
}
