//! Little-endian checkpoint container.
//!
//! ```text
//! "EFLC"  u32 version
//! u64 config length, config text (key = value lines)
//! u64 tensor count
//! per tensor: u32 name length, name, u32 rank, rank × u64 dims, numel × f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EFLC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ck.config.len() as u64).to_le_bytes());
    out.extend_from_slice(ck.config.as_bytes());
    out.extend_from_slice(&(ck.tensors.len() as u64).to_le_bytes());
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64, what: &str) -> Result<usize> {
        let left = (self.bytes.len() - self.pos) as u64;
        if v > left {
            return Err(self.err(format!("{what} {v} exceeds the {left} remaining bytes")));
        }
        Ok(v as usize)
    }

    fn text(&mut self, n: usize, what: &str) -> Result<String> {
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: start as u64,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

/// Parses a whole checkpoint; nothing is returned unless every byte checks out.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, not an EFLC checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u64("config length")?;
    let n = r.len(n, "config length")?;
    let config = r.text(n, "config block")?;
    let count = r.u64("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let n = r.len(u64::from(n), "name length")?;
        let name = r.text(n, "tensor name")?;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            r.pos -= 4;
            return Err(r.err(format!("tensor '{name}' has unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            if d == 0 {
                return Err(r.err(format!("tensor '{name}' has a zero dimension")));
            }
            numel = numel.saturating_mul(d);
            shape.push(d as usize);
        }
        let bytes_needed = r.len(numel.saturating_mul(8), "tensor payload")?;
        let raw = r.take(bytes_needed, "tensor payload")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after the tensor table"));
    }
    Ok(Checkpoint { config, tensors })
}

/// Writes atomically through a sibling temporary file.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(ck)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config: "name = tiny\nepoch = 3\n".into(),
            tensors: vec![
                ("a.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2)),
                ("opt/m/a.weight".into(), Tensor::from_fn(&[2, 3], |i| -(i as f64))),
                ("loss/alpha".into(), Tensor::scalar(-5.0)),
            ],
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = sample();
        let bytes = encode(&ck);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode(&back), bytes);
        assert_eq!(&bytes[..4], b"EFLC");
    }

    #[test]
    fn special_values_survive() {
        let ck = Checkpoint {
            config: String::new(),
            tensors: vec![("x".into(), Tensor::new(&[3], vec![-0.0, f64::MIN_POSITIVE, 1e300]).unwrap())],
        };
        let back = decode(&encode(&ck)).unwrap();
        let d = back.tensors[0].1.data();
        assert!(d[0].is_sign_negative() && d[0] == 0.0);
        assert_eq!(d[1], f64::MIN_POSITIVE);
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = encode(&sample());
        for cut in 0..bytes.len() {
            match decode(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode(&sample());
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
        let mut bytes = encode(&sample());
        bytes.push(0);
        assert!(decode(&bytes).is_err());
    }
}
