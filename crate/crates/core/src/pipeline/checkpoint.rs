//! Checkpoint files.
//!
//! Layout: magic `EMQC`, `u32` version, `u32` header length, a TOML header
//! (stage tag, payload checksum, label names, metrics and the full run
//! config), then the tensor payload. Each tensor is `u32` name length, UTF-8
//! name, `u8` trainable flag, `u32` rows, `u32` cols and row-major
//! little-endian `f32` values, in name order. Values are rounded to `f32`
//! when the checkpoint is built, so save and load are exact inverses.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Mat, ParamStore};
use crate::error::{EmoqError, Result};
use crate::harness::config::RunConfig;

const MAGIC: &[u8; 4] = b"EMQC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `stage1` or `stage2`.
    pub stage: String,
    pub labels: Vec<String>,
    pub config: RunConfig,
    pub metrics: BTreeMap<String, f64>,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: String,
    checksum: String,
    labels: Vec<String>,
    metrics: BTreeMap<String, f64>,
    config: RunConfig,
}

fn round_to_f32(store: &ParamStore) -> ParamStore {
    let mut out = store.clone();
    for (_, p) in out.iter_mut() {
        p.value.mapv_inplace(|v| f64::from(v as f32));
    }
    out
}

impl Checkpoint {
    pub fn new(
        stage: impl Into<String>,
        labels: Vec<String>,
        config: RunConfig,
        metrics: BTreeMap<String, f64>,
        params: &ParamStore,
    ) -> Self {
        Self {
            stage: stage.into(),
            labels,
            config,
            metrics,
            params: round_to_f32(params),
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(u8::from(p.trainable));
            out.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
            for v in p.value.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = self.payload();
        let header = Header {
            stage: self.stage.clone(),
            checksum: hex::encode(Sha256::digest(&payload)),
            labels: self.labels.clone(),
            metrics: self.metrics.clone(),
            config: self.config.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| EmoqError::Checkpoint(format!("header: {e}")))?;
        let mut out = Vec::with_capacity(12 + text.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| EmoqError::Checkpoint(format!("corrupt checkpoint: {what}"));
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4).map_err(|_| corrupt("too short"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(EmoqError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(header_len)?).map_err(|_| corrupt("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| corrupt(&format!("header: {e}")))?;
        let payload = &bytes[r.pos..];
        if hex::encode(Sha256::digest(payload)) != header.checksum {
            return Err(corrupt("checksum mismatch"));
        }
        let mut params = ParamStore::new();
        let mut t = Cursor { bytes: payload, pos: 0 };
        while t.pos < payload.len() {
            let name_len = t.u32()? as usize;
            let name = String::from_utf8(t.take(name_len)?.to_vec()).map_err(|_| corrupt("tensor name"))?;
            let trainable = match t.take(1)?[0] {
                0 => false,
                1 => true,
                _ => return Err(corrupt("trainable flag")),
            };
            let rows = t.u32()? as usize;
            let cols = t.u32()? as usize;
            let raw = t.take(rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or_else(|| corrupt("tensor size"))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            let value = Mat::from_shape_vec((rows, cols), values).expect("sized from header");
            params.insert(name, value, trainable);
        }
        Ok(Self {
            stage: header.stage,
            labels: header.labels,
            config: header.config,
            metrics: header.metrics,
            params,
        })
    }

    /// The payload checksum as recorded in a saved header.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.payload()))
    }

    /// Fail unless every tensor `expected` names exists here with that shape.
    pub fn check_shapes(&self, expected: &[(String, (usize, usize))]) -> Result<()> {
        for (name, shape) in expected {
            let got = self
                .params
                .get(name)
                .map_err(|_| EmoqError::Checkpoint(format!("checkpoint lacks tensor `{name}`")))?
                .value
                .dim();
            if got != *shape {
                return Err(EmoqError::Checkpoint(format!(
                    "shape mismatch for `{name}`: checkpoint has {got:?}, config expects {shape:?}"
                )));
            }
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| EmoqError::Checkpoint("corrupt checkpoint: truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| EmoqError::io(dir, e))?;
    }
    fs::write(path, checkpoint.to_bytes()?).map_err(|e| EmoqError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| EmoqError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        EmoqError::Checkpoint(msg) => EmoqError::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{check_shapes, parameter_shapes, FusionParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = RunConfig::desk();
        let fusion = FusionParams::new(cfg.fusion_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let metrics = BTreeMap::from([("train_wa".to_string(), 0.1 + 0.2)]);
        Checkpoint::new("stage1", vec!["a".into(), "b".into()], cfg, metrics, &fusion.store)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.emqc");
        let ck = sample();
        save_checkpoint(&ck, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        save_checkpoint(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn checksum_is_recorded() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();
        let payload = &bytes[12 + header_len..];
        let expected = hex::encode(Sha256::digest(payload));
        assert!(header.contains(&format!("checksum = \"{expected}\"")));
        assert_eq!(ck.checksum(), expected);
    }

    #[test]
    fn corruption_and_shape_mismatch() {
        let ck = sample();
        let mut bytes = ck.to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("checksum"));
        assert!(Checkpoint::from_bytes(b"EMQ").is_err());

        let mut altered = ck.config.clone();
        altered.d_h = 16;
        altered.num_heads = 2;
        let err = ck.check_shapes(&parameter_shapes(&altered.fusion_config())).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
        assert!(check_shapes(&ck.config.fusion_config(), &ck.params).is_ok());
    }
}
