//! `CALN` binary checkpoint format.
//!
//! ```text
//! magic    4 bytes  "CALN"
//! version  u32 LE   (currently 1)
//! count    u32 LE   number of entries
//! entry*   name_len u32 LE, name utf8,
//!          dtype u8 (0 = f32, 1 = f64, 2 = raw bytes),
//!          rank u8, dims u32 LE × rank,
//!          payload: product(dims) little-endian elements
//! ```
//!
//! Entries keep insertion order. Raw-byte entries carry metadata such as
//! model configs serialized as JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"CALN";
pub const VERSION: u32 = 1;
const DTYPE_BYTES: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Bytes(Vec<u8>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn push_tensor<T: Element>(&mut self, name: &str, t: &Tensor<T>) {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.to_f32().expect("f32")).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.to_f64_lossy()).collect()),
        };
        self.entries.push(Entry {
            name: name.to_string(),
            dims: t.shape().to_vec(),
            payload,
        });
    }

    pub fn push_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.entries.push(Entry {
            name: name.to_string(),
            dims: vec![bytes.len()],
            payload: Payload::Bytes(bytes),
        });
    }

    pub fn push_json<S: serde::Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        self.push_bytes(name, serde_json::to_vec(value)?);
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| format_err(format!("missing entry `{name}`")))
    }

    /// Reads an entry as a tensor of `T`. The stored dtype must match.
    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name)?;
        let data: Vec<T> = match (&e.payload, T::DTYPE) {
            (Payload::F32(v), DType::F32) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            (Payload::F64(v), DType::F64) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            _ => return Err(format_err(format!("entry `{name}` has a different dtype"))),
        };
        Tensor::new(e.dims.clone(), data)
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.entry(name)?.payload {
            Payload::Bytes(b) => Ok(b),
            _ => Err(format_err(format!("entry `{name}` is not a byte entry"))),
        }
    }

    pub fn json<D: serde::de::DeserializeOwned>(&self, name: &str) -> Result<D> {
        serde_json::from_slice(self.bytes(name)?).map_err(|e| format_err(format!("entry `{name}`: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let code = match e.payload {
                Payload::F32(_) => DType::F32.code(),
                Payload::F64(_) => DType::F64.code(),
                Payload::Bytes(_) => DTYPE_BYTES,
            };
            out.push(code);
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).map_err(|_| format_err("file shorter than magic"))? != MAGIC {
            return Err(format_err("bad magic, not a CALN checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err("entry name is not utf8"))?
                .to_string();
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = match code {
                0 => Payload::F32(
                    r.take(numel.checked_mul(4).ok_or_else(|| format_err("size overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                1 => Payload::F64(
                    r.take(numel.checked_mul(8).ok_or_else(|| format_err("size overflow"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                DTYPE_BYTES => Payload::Bytes(r.take(numel)?.to_vec()),
                other => return Err(format_err(format!("unknown dtype code {other}"))),
            };
            debug_assert_eq!(payload.len(), numel);
            entries.push(Entry {
                name,
                dims,
                payload,
            });
        }
        if r.pos != buf.len() {
            return Err(format_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { entries })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
