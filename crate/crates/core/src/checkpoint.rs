//! `HDCK` parameter files, little-endian throughout:
//!
//! ```text
//! "HDCK" | u32 version | u32 len, config text | u32 count |
//! count x { u32 len, name | u32 ndim | u64 dims.. | f32 data.. | u32 crc32 }
//! ```
//!
//! Each CRC covers the entry's name, ndim, dims and payload bytes.

use std::fs;
use std::path::Path;

use hdc_tensor::{ParamStore, Tensor};

use crate::config::KvConfig;
use crate::error::{io_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"HDCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore<f32>, config: &KvConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode(path: &Path, buf: &[u8]) -> Result<(ParamStore<f32>, KvConfig)> {
    let fail = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let truncated = || fail("truncated file");
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok_or_else(truncated)? != MAGIC {
        return Err(fail("unknown magic (not an HDCK checkpoint)"));
    }
    let version = r.u32().ok_or_else(truncated)?;
    if version != VERSION {
        return Err(fail(&format!("format version {version}, this build reads {VERSION}")));
    }
    let len = r.u32().ok_or_else(truncated)? as usize;
    let text = std::str::from_utf8(r.take(len).ok_or_else(truncated)?).map_err(|_| fail("config blob is not UTF-8"))?;
    let config = KvConfig::parse(text)?;
    let count = r.u32().ok_or_else(truncated)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let start = r.pos;
        let nlen = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(nlen).ok_or_else(truncated)?)
            .map_err(|_| fail("tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32().ok_or_else(truncated)? as usize;
        if ndim > 8 {
            return Err(Error::Checksum { path: path.to_path_buf(), name });
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| fail("shape overflow"))?;
        let payload = r.take(numel.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let body = &buf[start..r.pos];
        let crc = r.u32().ok_or_else(truncated)?;
        if crc32fast::hash(body) != crc {
            return Err(Error::Checksum { path: path.to_path_buf(), name });
        }
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        store
            .add(name, Tensor::new(shape, data)?)
            .map_err(|e| fail(&e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(fail("trailing bytes after last tensor"));
    }
    Ok((store, config))
}

pub fn save_checkpoint(params: &ParamStore<f32>, config: &KvConfig, path: &Path) -> Result<()> {
    // Write-then-rename so an interrupted save never clobbers a good file.
    let tmp = path.with_extension("hdck.tmp");
    fs::write(&tmp, encode(params, config)).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, KvConfig)> {
    let buf = fs::read(path).map_err(io_err(path))?;
    decode(path, &buf)
}

/// Copies loaded tensors into `target`, requiring identical names and shapes.
pub fn restore(target: &mut ParamStore<f32>, loaded: &ParamStore<f32>) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} tensors, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for id in target.ids().collect::<Vec<_>>() {
        let name = target.name(id).to_string();
        let t = loaded
            .by_name(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
        target.set(id, t.clone()).map_err(|e| Error::Config(format!("`{name}`: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore<f32>, KvConfig) {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap()).unwrap();
        s.add("b", Tensor::scalar(0.5)).unwrap();
        let kv = KvConfig::parse("channels=8\nmystery_key=keep me verbatim\n").unwrap();
        (s, kv)
    }

    #[test]
    fn round_trip_bit_exact() {
        let (s, kv) = sample();
        let (back, kv2) = decode(Path::new("x"), &encode(&s, &kv)).unwrap();
        assert_eq!(kv2, kv);
        for ((n1, t1), (n2, t2)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t1), bits(t2));
        }
    }

    #[test]
    fn detects_corruption() {
        let (s, kv) = sample();
        let good = encode(&s, &kv);
        let mut bad = good.clone();
        let last = bad.len() - 6;
        bad[last] ^= 0x01;
        let e = decode(Path::new("x"), &bad).unwrap_err();
        assert!(matches!(&e, Error::Checksum { name, .. } if name == "b"), "{e}");
        assert!(decode(Path::new("x"), &good[..good.len() - 3]).unwrap_err().to_string().contains("truncated"));
        let mut v = good.clone();
        v[4] = 9;
        assert!(decode(Path::new("x"), &v).unwrap_err().to_string().contains("version"));
        let mut m = good;
        m[0] = b'X';
        assert!(decode(Path::new("x"), &m).unwrap_err().to_string().contains("magic"));
    }
}
