//! Little-endian binary encoding shared by the feature, factor and model
//! file formats.
//!
//! Feature files (`.cdfm`):
//!
//! ```text
//! "CDFM" | u8 version=1 | u8 kind | u16 reserved | u32 T | u32 D | f32 frame_shift_ms
//! T*D f32, row-major
//! ```

use std::path::{Path, PathBuf};

use crate::dsp::{FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"CDFM";
pub const FEATURE_VERSION: u8 = 1;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vals: &[f64]) {
        self.buf.reserve(vals.len() * 4);
        for &v in vals {
            self.f32(v as f32);
        }
    }

    /// u16 byte length followed by UTF-8.
    pub fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len())
            .map_err(|_| Error::Invalid(format!("string too long to encode: {} bytes", s.len())))?;
        self.u16(len);
        self.bytes(s.as_bytes());
        Ok(())
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: &Path) -> Self {
        Self {
            buf,
            pos: 0,
            path: path.to_path_buf(),
        }
    }

    pub fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, msg)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub fn str16(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid UTF-8 string"))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_features(feat: &FeatureMatrix) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u8(FEATURE_VERSION);
    w.u8(feat.kind.code());
    w.u16(0);
    w.u32(feat.frames() as u32);
    w.u32(feat.dim() as u32);
    w.f32(feat.frame_shift_ms as f32);
    w.f32s(feat.data());
    w.into_inner()
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    let mut r = ByteReader::new(bytes, path);
    r.expect_magic(FEATURE_MAGIC)?;
    let version = r.u8()?;
    if version != FEATURE_VERSION {
        return Err(r.err(format!("unsupported feature file version {version}")));
    }
    let code = r.u8()?;
    let kind = FeatureKind::from_code(code).ok_or_else(|| r.err(format!("unknown feature kind {code}")))?;
    r.u16()?;
    let frames = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let shift = r.f32()? as f64;
    let data = r.f32s(frames * dim)?;
    r.finish()?;
    FeatureMatrix::new(frames, dim, data, shift, kind).map_err(|e| r.err(e.to_string()))
}

pub fn save_features(path: &Path, feat: &FeatureMatrix) -> Result<()> {
    write_bytes(path, &encode_features(feat))
}

pub fn load_features(path: &Path) -> Result<FeatureMatrix> {
    decode_features(&read_bytes(path)?, path)
}

/// Rounds every value to the nearest f32, the precision all files store.
pub fn quantize(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}
