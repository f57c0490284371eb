//! Named-tensor container with a JSON sidecar.
//!
//! Binary layout, little endian: magic `FRCK`, version `u32`, tensor count
//! `u32`; then per tensor: name length `u32`, UTF-8 name, rank `u32`, dims as
//! `u64`, values as `f64`. The sidecar lives next to it as `<file>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::seeding::Rng;
use crate::tensor::Array;

const MAGIC: &[u8; 4] = b"FRCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub config: serde_json::Value,
    pub samples_seen: u64,
    pub rng_state: Option<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Array>,
    pub meta: CheckpointMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes to a temporary sibling and renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `seed:stream:word_pos` in hex, enough to resume a ChaCha stream.
pub fn rng_state(rng: &Rng) -> String {
    format!("{}:{:x}:{:x}", hex::encode(rng.get_seed()), rng.get_stream(), rng.get_word_pos())
}

pub fn restore_rng(state: &str) -> Option<Rng> {
    use rand::SeedableRng;
    let mut parts = state.split(':');
    let seed: [u8; 32] = hex::decode(parts.next()?).ok()?.try_into().ok()?;
    let stream = u64::from_str_radix(parts.next()?, 16).ok()?;
    let pos = u128::from_str_radix(parts.next()?, 16).ok()?;
    let mut rng = Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(pos);
    Some(rng)
}

impl Checkpoint {
    pub fn new(stage: &str, config: serde_json::Value) -> Self {
        Checkpoint {
            tensors: BTreeMap::new(),
            meta: CheckpointMeta { stage: stage.to_string(), config, ..Default::default() },
        }
    }

    /// Adds every tensor of `module` under `prefix.`.
    pub fn insert_module(&mut self, prefix: &str, module: &dyn Module) {
        for (name, t) in module.named_tensors() {
            self.tensors.insert(crate::nn::join(prefix, &name), t.to_array());
        }
    }

    /// Tensors under `prefix.` with the prefix stripped.
    pub fn section(&self, prefix: &str) -> BTreeMap<String, Array> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    pub fn load_module(&self, prefix: &str, module: &dyn Module) -> Result<()> {
        module.load_state_dict(&self.section(prefix)).map_err(Error::Layout)
    }

    pub fn with_extra(mut self, key: &str, value: impl Serialize) -> Self {
        self.meta.extra.insert(key.to_string(), serde_json::to_value(value).unwrap_or_default());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, a) in &self.tensors {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in a.iter() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<BTreeMap<String, Array>> {
        let bad = |m: &str| Error::Format { path: origin.display().to_string(), message: m.to_string() };
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad("truncated"));
            }
            let (h, t) = r.split_at(n);
            r = t;
            Ok(h)
        };
        if take(4)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
        if u32_at(take(4)?) != VERSION {
            return Err(bad("unsupported version"));
        }
        let count = u32_at(take(4)?);
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let len = u32_at(take(4)?) as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| bad("name is not UTF-8"))?.to_string();
            let rank = u32_at(take(4)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let data = take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(name, Array::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad("shape"))?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())?;
        write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&self.meta)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let tensors = Self::from_bytes(&bytes, path)?;
        let side = sidecar_path(path);
        let meta = serde_json::from_str(&fs::read_to_string(&side)?)
            .map_err(|e| Error::Format { path: side.display().to_string(), message: e.to_string() })?;
        Ok(Checkpoint { tensors, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn round_trip_preserves_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Checkpoint::new("gan", serde_json::json!({"resolution": 16}));
        c.tensors.insert("a.w".into(), Array::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -0.0, 3.5, f64::MIN_POSITIVE, 1e300, -2.0]).unwrap());
        c.tensors.insert("b".into(), Array::from_elem(IxDyn(&[]), 7.0));
        c.meta.samples_seen = 42;
        let c = c.with_extra("init", "scratch");
        let p = dir.path().join("x.ckpt");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.meta, c.meta);
        for (k, v) in &c.tensors {
            let w = &back.tensors[k];
            assert_eq!(v.shape(), w.shape());
            assert!(v.iter().zip(w.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(!dir.path().join("x.ckpt.tmp").exists());
        assert!(Checkpoint::from_bytes(&c.to_bytes()[..20], &p).is_err());
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut r = crate::seeding::rng(9);
        r.next_u64();
        let s = rng_state(&r);
        let mut back = restore_rng(&s).unwrap();
        assert_eq!(r.next_u64(), back.next_u64());
    }
}
