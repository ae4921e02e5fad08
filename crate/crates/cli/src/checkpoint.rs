//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "SCLABCKP" | version u32 | arch length u32 | arch JSON
//! vocab hash (64 hex bytes) | trained u8 | tensor count u32
//! per tensor: name length u32 | name | rank u32 | dims u64… | data f64…
//! ```
//!
//! Next to every checkpoint sits a `.json` sidecar with the same header
//! fields and the tensor names and shapes, for humans.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use shortcut_core::models::{BiasOnlyConfig, BiasOnlyModel, ClassifierConfig, ClassifierModel};
use shortcut_core::tensor::{ParamSet, Tensor};

use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"SCLABCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    Classifier(ClassifierConfig),
    BiasOnly(BiasOnlyConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub vocab_hash: String,
    pub trained: bool,
    pub params: ParamSet,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    arch: Architecture,
    vocab_hash: String,
    trained: bool,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn classifier(model: &ClassifierModel, vocab_hash: &str) -> Self {
        Self {
            arch: Architecture::Classifier(model.config.clone()),
            vocab_hash: vocab_hash.to_string(),
            trained: model.trained,
            params: model.params.clone(),
        }
    }

    pub fn bias_only(model: &BiasOnlyModel, vocab_hash: &str) -> Self {
        Self {
            arch: Architecture::BiasOnly(model.config.clone()),
            vocab_hash: vocab_hash.to_string(),
            trained: true,
            params: model.params.clone(),
        }
    }

    pub fn into_classifier(self, path: &Path) -> Result<ClassifierModel> {
        let Architecture::Classifier(config) = self.arch else {
            return Err(format_err(path, "not a classifier checkpoint"));
        };
        let reference = ClassifierModel::new(config.clone());
        check_layout(path, &reference.params, &self.params)?;
        Ok(ClassifierModel {
            config,
            params: self.params,
            trained: self.trained,
        })
    }

    pub fn into_bias_only(self, path: &Path) -> Result<BiasOnlyModel> {
        let Architecture::BiasOnly(config) = self.arch else {
            return Err(format_err(path, "not a bias-only checkpoint"));
        };
        let reference = BiasOnlyModel::new(config.clone());
        check_layout(path, &reference.params, &self.params)?;
        Ok(BiasOnlyModel {
            config,
            params: self.params,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let arch = serde_json::to_vec(&self.arch).expect("architecture serializes");
        out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
        out.extend_from_slice(&arch);
        let mut hash = [b'0'; 64];
        let h = self.vocab_hash.as_bytes();
        hash[..h.len().min(64)].copy_from_slice(&h[..h.len().min(64)]);
        out.extend_from_slice(&hash);
        out.push(u8::from(self.trained));
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(format_err(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(path, format!("unsupported version {version}")));
        }
        let arch_len = r.u32()? as usize;
        let arch: Architecture =
            serde_json::from_slice(r.take(arch_len)?).map_err(|e| format_err(path, format!("architecture: {e}")))?;
        let vocab_hash = std::str::from_utf8(r.take(64)?)
            .map_err(|_| format_err(path, "vocabulary hash is not ASCII"))?
            .to_string();
        let trained = r.take(1)?[0] != 0;
        let count = r.u32()? as usize;
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| format_err(path, e))?;
            params.push(name, t);
        }
        if r.pos != bytes.len() {
            return Err(format_err(path, "trailing bytes"));
        }
        Ok(Self {
            arch,
            vocab_hash,
            trained,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))?;
        let sidecar = Sidecar {
            version: VERSION,
            arch: self.arch.clone(),
            vocab_hash: self.vocab_hash.clone(),
            trained: self.trained,
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect(),
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(&side, text + "\n").map_err(|e| LabError::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn format_err(path: &Path, reason: impl std::fmt::Display) -> LabError {
    LabError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn check_layout(path: &Path, expected: &ParamSet, actual: &ParamSet) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(format_err(
            path,
            format!("{} tensors, architecture needs {}", actual.len(), expected.len()),
        ));
    }
    for ((en, et), (an, at)) in expected.iter().zip(actual.iter()) {
        if en != an || et.shape() != at.shape() {
            return Err(format_err(
                path,
                format!("tensor `{an}` {:?} where `{en}` {:?} expected", at.shape(), et.shape()),
            ));
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(self.path, "truncated checkpoint"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ClassifierModel {
        let mut c = ClassifierConfig::new(12, 3);
        c.dim = 4;
        c.seed = 2;
        ClassifierModel::new(c)
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let ck = Checkpoint::classifier(&m, &"ab".repeat(32));
        let back = Checkpoint::from_bytes(Path::new("x"), &ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.into_classifier(Path::new("x")).unwrap(), m);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::classifier(&model(), &"0".repeat(64)).to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(p, &bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(p, &bad).is_err());
        let mut longer = bytes;
        longer.push(0);
        assert!(Checkpoint::from_bytes(p, &longer).is_err());
    }

    #[test]
    fn kind_is_checked() {
        let ck = Checkpoint::classifier(&model(), &"0".repeat(64));
        assert!(ck.into_bias_only(Path::new("x")).is_err());
    }

    #[test]
    fn sidecar_lists_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        Checkpoint::classifier(&model(), &"0".repeat(64)).save(&path).unwrap();
        let side = std::fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(side.contains("\"embedding\""));
        assert!(side.contains("\"classifier\""));
        assert_eq!(Checkpoint::load(&path).unwrap().params.len(), model().params.len());
    }
}
