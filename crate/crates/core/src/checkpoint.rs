//! Binary checkpoint container.
//!
//! Layout (all integers 4-byte little-endian unsigned):
//!
//! ```text
//! "CFK1" | version | array count
//! per array: name length | name (UTF-8) | rank | extents… | values (f32 LE, row-major)
//! config length | config text (key=value lines)
//! ```
//!
//! Values are always stored in single precision.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CFK1";
pub const VERSION: u32 = 1;

pub fn encode<F: Real>(model: &Model<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let entries = model.params.entries();
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank() as u32);
        for &e in t.shape() {
            put_u32(&mut out, e as u32);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let cfg = model.config.to_text();
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.bytes(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses a checkpoint and validates every array against the embedded config.
pub fn decode<F: Real>(bytes: &[u8]) -> Result<Model<F>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes, not a CFK1 file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("array count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name = r.text(&format!("name of array {i}"))?;
        let rank = r.u32(&format!("rank of '{name}'"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32(&format!("extents of '{name}'"))? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 4, &format!("values of '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| F::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|_| Error::Checkpoint(format!("array '{name}' has invalid shape {shape:?}")))?;
        entries.push((name, t));
    }
    let cfg_text = r.text("config")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after config",
            bytes.len() - r.pos
        )));
    }
    let config = ModelConfig::from_text(&cfg_text)?;
    Model::from_params(config, ParamStore::from_entries(entries))
}

pub fn save_checkpoint<F: Real>(model: &Model<F>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<Model<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

/// Loads and requires the stored config to equal `expected`.
pub fn load_checkpoint_for<F: Real>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model<F>> {
    let model = load_checkpoint(path)?;
    if &model.config != expected {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint has\n{}expected\n{}",
            model.config.to_text(),
            expected.to_text()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny() -> Model<f32> {
        init_params(&ModelConfig::tiny(), 3).unwrap()
    }

    #[test]
    fn header_layout() {
        let m = tiny();
        let bytes = encode(&m);
        assert_eq!(&bytes[..4], b"CFK1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        let first = &m.params.entries()[0];
        let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + name_len], first.0.as_bytes());
    }

    #[test]
    fn decode_roundtrip_is_bit_exact() {
        let m = tiny();
        let back: Model<f32> = decode(&encode(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), encode(&m));
    }

    #[test]
    fn decode_errors() {
        let bytes = encode(&tiny());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).unwrap_err().to_string().contains("magic"));

        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode::<f32>(&bad).unwrap_err().to_string().contains("version"));

        assert!(decode::<f32>(&bytes[..bytes.len() - 3]).is_err());

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
    }

    #[test]
    fn missing_array_is_named() {
        let m = tiny();
        let mut entries = m.params.entries().to_vec();
        let removed = entries.remove(5).0;
        let broken = Model {
            config: m.config.clone(),
            params: ParamStore::from_entries(entries),
        };
        let err = decode::<f32>(&encode(&broken)).unwrap_err().to_string();
        assert!(err.contains(&removed), "{err}");
    }
}
