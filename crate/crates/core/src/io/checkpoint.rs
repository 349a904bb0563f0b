//! Named-weights container.
//!
//! | size      | content                                           |
//! |-----------|---------------------------------------------------|
//! | 4         | magic `DCK1`                                      |
//! | 8         | metadata length `m`, little-endian u64            |
//! | m         | UTF-8 TOML: `stages`, `config_hash`, `[model]`    |
//! | 8         | tensor count, little-endian u64                   |
//! | per entry | u32 name length, UTF-8 name, one `DCT1` record    |
//!
//! Entries appear in parameter-store order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{diff_summary, ModelSpec};
use super::tensor_file::{decode_tensor, encode_tensor, format_err};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    stages: usize,
    config_hash: String,
    model: ModelSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub config_hash: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(spec: &ModelSpec, store: &ParamStore) -> Self {
        Self {
            spec: spec.clone(),
            config_hash: spec.hash(),
            tensors: store.iter().map(|(n, t)| (n.to_owned(), t.clone())).collect(),
        }
    }

    /// Refuses a checkpoint built for a different model, listing the
    /// differing config lines.
    pub fn check_spec(&self, expected: &ModelSpec) -> Result<()> {
        if self.config_hash == expected.hash() {
            return Ok(());
        }
        Err(Error::Config(format!(
            "checkpoint config hash {} does not match run config {}\n{}",
            self.config_hash,
            expected.hash(),
            diff_summary(&expected.to_toml(), &self.spec.to_toml())
        )))
    }

    /// Copies the weights into `store`; names and shapes must match.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load_from(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = toml::to_string(&Meta {
            stages: self.spec.stages,
            config_hash: self.config_hash.clone(),
            model: self.spec.clone(),
        })
        .expect("checkpoint metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&encode_tensor(t));
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| format_err(bytes.len(), format!("truncated {what} starting at byte {pos}")))?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        if take(&mut pos, 4, "magic")? != CHECKPOINT_MAGIC {
            return Err(format_err(0, "bad checkpoint magic"));
        }
        let mlen = u64::from_le_bytes(take(&mut pos, 8, "metadata length")?.try_into().unwrap());
        let mstart = pos;
        let meta_bytes = take(&mut pos, usize::try_from(mlen).unwrap_or(usize::MAX), "metadata")?;
        let text = std::str::from_utf8(meta_bytes)
            .map_err(|e| format_err(mstart + e.valid_up_to(), "metadata is not UTF-8"))?;
        let meta: Meta = toml::from_str(text).map_err(|e| format_err(mstart, format!("bad metadata: {e}")))?;
        if meta.stages != meta.model.stages {
            return Err(format_err(mstart, "metadata stage counts disagree"));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8, "tensor count")?.try_into().unwrap());
        let mut tensors = Vec::new();
        for _ in 0..count {
            let nlen = u32::from_le_bytes(take(&mut pos, 4, "name length")?.try_into().unwrap());
            let nstart = pos;
            let name = std::str::from_utf8(take(&mut pos, nlen as usize, "name")?)
                .map_err(|_| format_err(nstart, "tensor name is not UTF-8"))?
                .to_owned();
            let (t, used) = decode_tensor(&bytes[pos..], pos)?;
            pos += used;
            tensors.push((name, t));
        }
        if pos != bytes.len() {
            return Err(format_err(pos, "trailing bytes after last tensor"));
        }
        Ok(Self {
            spec: meta.model,
            config_hash: meta.config_hash,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::RunConfig;

    fn sample() -> Checkpoint {
        let spec = RunConfig::simulation(16, 16, 4, 1).model_spec();
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5));
        store.add("b", Tensor::scalar(-1.25).to_f32());
        Checkpoint::from_store(&spec, &store)
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Checkpoint::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = sample().encode();
        for cut in 0..bytes.len() {
            match Checkpoint::decode(&bytes[..cut]) {
                Err(Error::Format { .. }) => {}
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn mismatched_spec_is_refused_with_diff() {
        let c = sample();
        let mut other = RunConfig::simulation(16, 16, 4, 1);
        c.check_spec(&other.model_spec()).unwrap();
        other.stages = 5;
        let err = c.check_spec(&other.model_spec()).unwrap_err().to_string();
        assert!(err.contains("+ stages = 3") && err.contains("- stages = 5"), "{err}");
    }
}
