//! Binary checkpoint files with a bit-exact round trip.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "MDRLCKPT"
//! 8       4     format version (u32, currently 1)
//! 12      4     vocab_size (u32)
//! 16      4     embed_dim (u32)
//! 20      4     n_layers (u32)
//! 24      4     n_heads (u32)
//! 28      4     ff_dim (u32)
//! 32      4     max_len (u32)
//! 36      8     seed (u64)
//! 44      4     tensor count (u32)
//! ```
//!
//! Then one record per tensor, sorted by name:
//!
//! ```text
//! 4             name length n (u32)
//! n             name (UTF-8)
//! 4             rank (u32, always 2)
//! 4 × rank      dims (u32 each: rows, cols)
//! 8 × len       values (f64, row-major)
//! ```
//!
//! Writes go to a temp file in the target directory followed by an atomic
//! rename, so an interrupted run leaves no partial checkpoint behind.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::scalar::{cast, to_f64, Real};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MDRLCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn encode<T: Real>(cfg: &ModelConfig, params: &ParamStore<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, FORMAT_VERSION);
    for v in [cfg.vocab_size, cfg.embed_dim, cfg.n_layers, cfg.n_heads, cfg.ff_dim, cfg.max_len] {
        push_u32(&mut buf, v as u32);
    }
    push_u64(&mut buf, cfg.seed);
    push_u32(&mut buf, params.len() as u32);
    // BTreeMap iteration is already name-sorted.
    for (name, t) in params.iter() {
        push_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        push_u32(&mut buf, 2);
        push_u32(&mut buf, t.rows() as u32);
        push_u32(&mut buf, t.cols() as u32);
        for &v in t.data() {
            buf.extend_from_slice(&to_f64(v).to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(buf: &[u8]) -> Result<(ModelConfig, ParamStore<T>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let cfg = ModelConfig {
        vocab_size: r.u32()? as usize,
        embed_dim: r.u32()? as usize,
        n_layers: r.u32()? as usize,
        n_heads: r.u32()? as usize,
        ff_dim: r.u32()? as usize,
        max_len: r.u32()? as usize,
        seed: r.u64()?,
    };
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut last_name: Option<String> = None;
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        if let Some(prev) = &last_name {
            if *prev >= name {
                return Err(Error::Checkpoint("tensor names out of order".into()));
            }
        }
        let rank = r.u32()?;
        if rank != 2 {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}, want 2")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(cast::<T>(r.f64()?));
        }
        params.insert(&name, Tensor::from_vec(rows, cols, data));
        last_name = Some(name);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((cfg, params))
}

/// Atomic write: temp file in the same directory, then rename.
pub fn save<T: Real>(path: &Path, cfg: &ModelConfig, params: &ParamStore<T>) -> Result<()> {
    let bytes = encode(cfg, params);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(ModelConfig, ParamStore<T>)> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn load_model<T: Real>(path: &Path) -> Result<Model<T>> {
    let (cfg, params) = load(path)?;
    cfg.validate()?;
    Ok(Model { cfg, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    fn small_model() -> Model<f64> {
        Model::init(ModelConfig {
            vocab_size: 9,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 2,
            ff_dim: 12,
            max_len: 16,
            seed: 42,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small_model();
        let bytes = encode(&m.cfg, &m.params);
        let (cfg2, params2) = decode::<f64>(&bytes).unwrap();
        assert_eq!(cfg2, m.cfg);
        assert_eq!(params2, m.params);
        let bytes2 = encode(&cfg2, &params2);
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let m = small_model();
        save(&path, &m.cfg, &m.params).unwrap();
        let m2: Model<f64> = load_model(&path).unwrap();
        assert_eq!(m2.params, m.params);
        assert!(!dir.path().join(".ck.bin.tmp").exists());
    }

    #[test]
    fn version_and_magic_are_checked() {
        let m = small_model();
        let mut bytes = encode(&m.cfg, &m.params);
        bytes[8] = 99; // bump version byte
        let err = decode::<f64>(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));

        let mut bad = encode(&m.cfg, &m.params);
        bad[0] = b'X';
        assert!(decode::<f64>(&bad).is_err());
    }

    #[test]
    fn truncation_is_detected() {
        let m = small_model();
        let bytes = encode(&m.cfg, &m.params);
        assert!(decode::<f64>(&bytes[..bytes.len() - 3]).is_err());
    }
}
