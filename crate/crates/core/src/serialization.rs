//! Single-file chunked binary container shared by models and network weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EVAM"                      magic
//! u16                         format version
//! u16 len, bytes              kind tag (e.g. "morphable_model", "fast_dhm")
//! u32 len, bytes              UTF-8 JSON metadata
//! u32                         chunk count
//! per chunk:
//!   u16 len, bytes            name
//!   u8                        dtype (1 = f32, 2 = f64)
//!   u8                        rank
//!   u32 × rank                dims
//!   payload                   row-major little-endian values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor_nn::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"EVAM";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values are kept in f64; `dtype` decides the on-disk width.
    pub data: Vec<f64>,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkFile {
    pub kind: String,
    pub meta: Value,
    pub chunks: Vec<Chunk>,
}

impl ChunkFile {
    pub fn new(kind: &str, meta: Value) -> Self {
        ChunkFile {
            kind: kind.to_string(),
            meta,
            chunks: Vec::new(),
        }
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>, dtype: DType) {
        self.chunks.push(Chunk {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
            dtype,
        });
    }

    pub fn push_raw(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        self.chunks.push(Chunk {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            dtype: DType::F64,
        });
    }

    pub fn chunk(&self, name: &str) -> Result<&Chunk> {
        self.chunks
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Data(format!("{} file is missing chunk '{name}'", self.kind)))
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let c = self.chunk(name)?;
        Tensor::from_vec(&c.shape, c.data.iter().map(|&v| T::of(v)).collect())
            .map_err(|e| Error::Data(format!("chunk '{name}': {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Data(format!("expected a '{kind}' file, found '{}'", self.kind)))
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.kind.len() as u16).to_le_bytes());
        out.extend_from_slice(self.kind.as_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("JSON value serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for c in &self.chunks {
            out.extend_from_slice(&(c.name.len() as u16).to_le_bytes());
            out.extend_from_slice(c.name.as_bytes());
            out.push(match c.dtype {
                DType::F32 => DTYPE_F32,
                DType::F64 => DTYPE_F64,
            });
            out.push(c.shape.len() as u8);
            for &d in &c.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match c.dtype {
                DType::F32 => c.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
                DType::F64 => c.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Data("bad magic: not an EVAM file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported EVAM version {version}")));
        }
        let kind_len = r.u16()? as usize;
        let kind = r.string(kind_len)?;
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Data(format!("bad metadata JSON: {e}")))?;
        let count = r.u32()? as usize;
        let mut chunks = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.string(name_len)?;
            let dtype = match r.u8()? {
                DTYPE_F32 => DType::F32,
                DTYPE_F64 => DType::F64,
                other => return Err(Error::Data(format!("chunk '{name}': unknown dtype {other}"))),
            };
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                DType::F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            };
            chunks.push(Chunk {
                name,
                shape,
                data,
                dtype,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Data(format!("{} trailing bytes after last chunk", bytes.len() - r.pos)));
        }
        Ok(ChunkFile { kind, meta, chunks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
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
            .ok_or_else(|| Error::Data("truncated EVAM file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Data("invalid UTF-8 in header".into()))
    }
}

/// Encodes an H×W×3 tensor with values in `[0, 1]` as binary PPM (P6).
/// Values map to `floor(255·v + 0.5)`.
pub fn encode_ppm(rgb: &Tensor<f64>) -> Result<Vec<u8>> {
    let (h, w, c) = rgb.hwc()?;
    if c != 3 {
        return Err(Error::Contract(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.data().iter().map(|&v| quantize_u8(v)));
    Ok(out)
}

pub fn quantize_u8(v: f64) -> u8 {
    (255.0 * v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Decodes a binary PPM (P6, maxval 255) into an H×W×3 tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f64>> {
    let bad = |m: &str| Error::Data(format!("invalid PPM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("only P6 is supported"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1;
    let payload = bytes.get(pos..pos + w * h * 3).ok_or_else(|| bad("truncated pixel data"))?;
    Tensor::from_vec(&[h, w, 3], payload.iter().map(|&b| b as f64 / 255.0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut f = ChunkFile::new("x", Value::Null);
        f.push_raw("a", &[2], vec![1.0, 2.0]);
        let bytes = f.to_bytes();
        assert!(ChunkFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ChunkFile::from_bytes(&bad).is_err());
    }

    #[test]
    fn f32_chunks_use_four_bytes_per_value() {
        let t = Tensor::<f64>::full(&[10, 10], 0.25);
        let mut a = ChunkFile::new("k", Value::Null);
        a.push_tensor("w", &t, DType::F32);
        let mut b = ChunkFile::new("k", Value::Null);
        b.push_tensor("w", &t, DType::F64);
        assert_eq!(b.to_bytes().len() - a.to_bytes().len(), 400);
    }

    proptest! {
        #[test]
        fn roundtrip_is_lossless_for_f64(
            data in proptest::collection::vec(-1e6f64..1e6, 1..40),
            kind in "[a-z_]{1,12}",
        ) {
            let n = data.len();
            let mut f = ChunkFile::new(&kind, serde_json::json!({"n": n}));
            f.push_raw("values", &[n], data);
            f.push_raw("empty", &[0, 3], vec![]);
            let back = ChunkFile::from_bytes(&f.to_bytes()).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
