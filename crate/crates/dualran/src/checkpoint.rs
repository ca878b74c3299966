//! Checkpoint container: a little-endian binary file holding the model
//! config and every trainable array, bit-exact across save/load.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes   "DRCKPT01"
//! version      u32       currently 1
//! config_hash  u64       FNV-1a 64 over the config JSON bytes
//! config_len   u32       length of the config JSON
//! config       bytes     canonical serde_json of ModelConfig
//! array_count  u32
//! per array:
//!   name_len   u32
//!   name       bytes     registry path, e.g. "local.0.rnn.fwd.w_ih"
//!   dtype      u8        0 = f32, 1 = f64
//!   rank       u8
//!   extents    rank*u64
//!   data       numel * size_of(dtype), little-endian
//! ```
//!
//! All integers are little-endian. A truncated or inconsistent file fails
//! with a format error naming the offending array; nothing is partially
//! loaded.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::ParamSet;
use crate::rng::SeedRng;
use crate::tensor::{Dtype, Element, Tensor};

const MAGIC: &[u8; 8] = b"DRCKPT01";
const VERSION: u32 = 1;

/// FNV-1a 64-bit hash of the canonical JSON serialization of the config.
pub fn config_hash(cfg: &ModelConfig) -> u64 {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Write config and parameters to `path`.
pub fn save<E: Element>(path: &Path, cfg: &ModelConfig, params: &ModelParams<E>) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash(cfg).to_le_bytes());
    let json = serde_json::to_vec(cfg)
        .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);

    let flat = params.flatten();
    buf.extend_from_slice(&(flat.len() as u32).to_le_bytes());
    for (name, tensor) in &flat {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(E::DTYPE.tag());
        buf.push(tensor.rank() as u8);
        for e in tensor.shape() {
            buf.extend_from_slice(&(*e as u64).to_le_bytes());
        }
        for v in tensor.data() {
            match E::DTYPE {
                Dtype::F32 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Dtype::F64 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint while reading {what}"
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Read a checkpoint, returning the embedded config and the parameters.
/// The element type must match the stored dtype.
pub fn load<E: Element>(path: &Path) -> Result<(ModelConfig, ModelParams<E>)> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        data: &bytes,
        pos: 0,
    };
    if cur.take(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let stored_hash = cur.u64("config hash")?;
    let config_len = cur.u32("config length")? as usize;
    let json = cur.take(config_len, "config")?;
    let cfg: ModelConfig = serde_json::from_slice(json)
        .map_err(|e| Error::Format(format!("embedded config is invalid: {e}")))?;
    let recomputed = config_hash(&cfg);
    if recomputed != stored_hash {
        return Err(Error::Format(format!(
            "config hash mismatch: header {stored_hash:#018x}, embedded config {recomputed:#018x}"
        )));
    }

    let count = cur.u32("array count")? as usize;
    let mut arrays: std::collections::HashMap<String, Tensor<E>> =
        std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32("array name length")? as usize;
        let name = String::from_utf8(cur.take(name_len, "array name")?.to_vec())
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let dtype = Dtype::from_tag(cur.u8("dtype")?)
            .ok_or_else(|| Error::Format(format!("array {name}: unknown dtype tag")))?;
        if dtype != E::DTYPE {
            return Err(Error::Format(format!(
                "array {name}: stored dtype {dtype:?} does not match requested {:?}",
                E::DTYPE
            )));
        }
        let rank = cur.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64("extent")? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = match dtype {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        };
        let raw = cur.take(numel * width, &format!("data of {name}"))?;
        let mut data = Vec::with_capacity(numel);
        match dtype {
            Dtype::F32 => {
                for c in raw.chunks_exact(4) {
                    data.push(E::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64));
                }
            }
            Dtype::F64 => {
                for c in raw.chunks_exact(8) {
                    data.push(E::from_f64(f64::from_le_bytes(c.try_into().unwrap())));
                }
            }
        }
        arrays.insert(name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last array".into()));
    }

    // Rebuild the parameter structure from the config skeleton, replacing
    // each registry entry by its stored array.
    let skeleton = ModelParams::<E>::init(&cfg, &mut SeedRng::new(0))?;
    let expected: Vec<(String, Tensor<E>)> = skeleton.flatten();
    let mut replacement = Vec::with_capacity(expected.len());
    for (name, tensor) in &expected {
        let stored = arrays.remove(name).ok_or_else(|| {
            Error::Format(format!("checkpoint is missing array {name}"))
        })?;
        if stored.shape() != tensor.shape() {
            return Err(Error::Format(format!(
                "array {name}: stored shape {:?} does not match config shape {:?}",
                stored.shape(),
                tensor.shape()
            )));
        }
        replacement.push(stored);
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Format(format!(
            "checkpoint has unexpected array {extra}"
        )));
    }
    let params = skeleton.from_flat(&replacement);
    Ok((cfg, params))
}

/// Load a checkpoint that must match `expected`; refuses with both hashes
/// otherwise.
pub fn load_expecting<E: Element>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<ModelParams<E>> {
    let (cfg, params) = load::<E>(path)?;
    let got = config_hash(&cfg);
    let want = config_hash(expected);
    if got != want {
        return Err(Error::Format(format!(
            "checkpoint config hash {got:#018x} does not match expected {want:#018x}"
        )));
    }
    Ok(params)
}
