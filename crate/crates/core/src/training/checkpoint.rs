//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `CMAE`, `u32` format version, `u64` header
//! length, JSON header, raw `f64` tensor payloads in directory order, and a
//! CRC32 of every preceding byte.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CatMae, ModelConfig, ParamStore};
use crate::numerics::Tensor;
use crate::training::optim::OptimizerState;

pub const MAGIC: &[u8; 4] = b"CMAE";
pub const FORMAT_VERSION: u32 = 1;
const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    /// Root seed; every random draw is keyed by `(seed, purpose, step, sample)`,
    /// so the seed and step fully determine the generator states.
    pub seed: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    seed: u64,
    step: u64,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.params.len() * 3);
        for p in &self.params.entries {
            out.push((p.name.clone(), &p.tensor));
        }
        for (p, m) in self.params.entries.iter().zip(&self.optimizer.m) {
            out.push((format!("{MOMENT1}{}", p.name), m));
        }
        for (p, v) in self.params.entries.iter().zip(&self.optimizer.v) {
            out.push((format!("{MOMENT2}{}", p.name), v));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.optimizer.check(&self.params)?;
        let named = self.named_tensors();
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry { name: name.clone(), dtype: "f64".into(), shape: t.shape().to_vec(), offset };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            optimizer_step: self.optimizer.step,
            tensors,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |what: &str| Error::CheckpointTruncated(format!("{} bytes, ends inside the {what}", bytes.len()));
        if bytes.len() < 16 {
            return Err(truncated("preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::CheckpointCorrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize.checked_add(header_len).ok_or_else(|| Error::CheckpointCorrupt("header length".into()))?;
        if bytes.len() < header_end {
            return Err(truncated("header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::CheckpointCorrupt(format!("header: {e}")))?;
        let payload_len: usize = header.tensors.iter().map(|t| 8 * t.shape.iter().product::<usize>()).sum();
        let expected = header_end + payload_len + 4;
        if bytes.len() < expected {
            return Err(truncated("payload"));
        }
        if bytes.len() > expected {
            return Err(Error::CheckpointCorrupt(format!("{} trailing bytes", bytes.len() - expected)));
        }
        let body = &bytes[..expected - 4];
        let crc = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(Error::CheckpointCorrupt("CRC mismatch".into()));
        }

        let payload = &bytes[header_end..expected - 4];
        let mut found: HashMap<String, Tensor> = HashMap::new();
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(Error::CheckpointCorrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let chunk = payload
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::CheckpointCorrupt(format!("{}: offset out of range", e.name)))?;
            let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            found.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }

        let template = CatMae::new(header.config.clone(), &mut crate::numerics::Rng::new(0, 0))?;
        let mut params = template.params.clone();
        let mut optimizer = OptimizerState::new(&params);
        optimizer.step = header.optimizer_step;
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = found.remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape {
                return Err(Error::CheckpointCorrupt(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for (i, p) in params.entries.iter_mut().enumerate() {
            let shape = p.tensor.shape().to_vec();
            p.tensor = take(p.name.clone(), &shape)?;
            optimizer.m[i] = take(format!("{MOMENT1}{}", p.name), &shape)?;
            optimizer.v[i] = take(format!("{MOMENT2}{}", p.name), &shape)?;
        }
        if let Some(name) = header.tensors.iter().map(|e| &e.name).find(|n| found.contains_key(*n)) {
            return Err(Error::UnknownTensor(name.clone()));
        }
        Ok(Self { config: header.config, params, optimizer, seed: header.seed, step: header.step })
    }
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn sample() -> Checkpoint {
        let model = CatMae::new(ModelConfig::micro(), &mut Rng::new(3, 0)).unwrap();
        let mut optimizer = OptimizerState::new(&model.params);
        let mut rng = Rng::new(4, 0);
        for t in optimizer.m.iter_mut().chain(optimizer.v.iter_mut()) {
            for x in t.data_mut() {
                *x = rng.normal() * 1e-3;
            }
        }
        optimizer.step = 17;
        Checkpoint { config: model.config, params: model.params, optimizer, seed: 99, step: 17 }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::CheckpointTruncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::CheckpointTruncated(_))));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::CheckpointVersion { found: 9, .. })));

        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 10] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CheckpointCorrupt(_))));
    }

    fn rewrite(bytes: &[u8], extra_payload: &[u8], edit: impl Fn(&mut serde_json::Value)) -> Vec<u8> {
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        edit(&mut header);
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[16 + hl..bytes.len() - 4]);
        out.extend_from_slice(extra_payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    #[test]
    fn unknown_and_missing_tensors() {
        let bytes = sample().to_bytes().unwrap();
        let renamed = rewrite(&bytes, &[], |h| h["tensors"][0]["name"] = "encoder.bogus".into());
        let err = Checkpoint::from_bytes(&renamed).unwrap_err();
        assert!(matches!(err, Error::MissingTensor(ref n) if n == "encoder.patch_embed.w"), "{err}");

        let payload_len = (bytes.len() - 20 - u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize) as u64;
        let extra = rewrite(&bytes, &1.5f64.to_le_bytes(), |h| {
            let entry = serde_json::json!({"name": "decoder.extra", "dtype": "f64", "shape": [1], "offset": payload_len});
            h["tensors"].as_array_mut().unwrap().push(entry);
        });
        let err = Checkpoint::from_bytes(&extra).unwrap_err();
        assert!(matches!(err, Error::UnknownTensor(ref n) if n == "decoder.extra"), "{err}");
    }
}
