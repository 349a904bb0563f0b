//! Run configuration in TOML.
//!
//! ```toml
//! stages = 3
//! model_seed = 7
//!
//! [sensing]
//! height = 32
//! width = 32
//! bands = 8
//! mask_seed = 1
//!
//! [arch]
//! window = 8
//! [arch.toggles]
//! crw = true
//!
//! [cg]
//! max_iters = 5
//!
//! [noise]
//! sigma_c = 0.0
//! sigma_p = 0.0
//! seed = 0
//!
//! [train]
//! steps = 200
//! lr = 1e-3
//!
//! [paths]
//! scene = "scene.dct"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::in2set::{ArchConfig, Toggles};
use crate::metrics::CorrelationConfig;
use crate::sensing::{NoiseModel, SensingConfig};
use crate::solver::{CgConfig, TrainConfig};

fn default_stages() -> usize {
    3
}

fn default_window() -> usize {
    8
}

fn default_expansion() -> usize {
    4
}

/// Architecture knobs; spatial size and band count come from `[sensing]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_expansion")]
    pub ffn_expansion: usize,
    #[serde(default)]
    pub toggles: Toggles,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            window: default_window(),
            ffn_expansion: default_expansion(),
            toggles: Toggles::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Ground-truth cube for `simulate` and for scoring reconstructions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassi: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pan: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of training cubes (`*.dct`, sorted by name).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
}

/// Everything a command needs besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_stages")]
    pub stages: usize,
    #[serde(default)]
    pub model_seed: u64,
    pub sensing: SensingConfig,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub cg: CgConfig,
    #[serde(default = "NoiseModel::noiseless")]
    pub noise: NoiseModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub correlation: CorrelationConfig,
    #[serde(default)]
    pub paths: Paths,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// The part of a run that determines model weights' meaning; its hash is
/// stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub stages: usize,
    pub arch: ArchConfig,
    pub sensing: SensingConfig,
}

impl ModelSpec {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))
    }

    /// SHA-256 of the canonical TOML text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Line-level summary of how two TOML texts differ.
pub fn diff_summary(expected: &str, found: &str) -> String {
    let a: Vec<&str> = expected.lines().collect();
    let b: Vec<&str> = found.lines().collect();
    let mut out = String::new();
    for l in &a {
        if !b.contains(l) {
            out.push_str(&format!("- {l}\n"));
        }
    }
    for l in &b {
        if !a.contains(l) {
            out.push_str(&format!("+ {l}\n"));
        }
    }
    out
}

impl RunConfig {
    /// Defaults for an `H x W x C` simulation with seeded mask.
    pub fn simulation(height: usize, width: usize, bands: usize, mask_seed: u64) -> Self {
        Self {
            stages: default_stages(),
            model_seed: 0,
            sensing: SensingConfig::simulation(height, width, bands, mask_seed),
            arch: ArchSection::default(),
            cg: CgConfig::default(),
            noise: NoiseModel::noiseless(),
            train: None,
            correlation: CorrelationConfig::default(),
            paths: Paths::default(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        self.cg.validate()?;
        if let Some(t) = &self.train {
            t.validate()?;
        }
        self.sensing.mask_source()?;
        Ok(())
    }

    pub fn arch_config(&self) -> ArchConfig {
        ArchConfig {
            height: self.sensing.height,
            width: self.sensing.width,
            bands: self.sensing.bands,
            window: self.arch.window,
            ffn_expansion: self.arch.ffn_expansion,
            toggles: self.arch.toggles,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            stages: self.stages,
            arch: self.arch_config(),
            sensing: self.sensing.clone(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Resolved path of `which`, or a config error naming the missing key.
    pub fn path(&self, which: &str) -> Result<PathBuf> {
        let p = match which {
            "scene" => &self.paths.scene,
            "cassi" => &self.paths.cassi,
            "pan" => &self.paths.pan,
            "checkpoint" => &self.paths.checkpoint,
            "dataset" => &self.paths.dataset,
            _ => &None,
        };
        p.as_deref()
            .map(|p| self.resolve(p))
            .ok_or_else(|| Error::Config(format!("paths.{which} is not set")))
    }
}
