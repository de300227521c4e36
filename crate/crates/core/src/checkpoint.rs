//! Binary checkpoint container shared by both attention stages.
//!
//! Layout (little endian): magic `DUALATT\0`, `u32` version, `u8` scalar
//! width in bytes, `u32` section count, then per section a `u16` name
//! length, the UTF-8 name, a `u64` payload length and the payload.
//! Parameter sections hold raw scalars; text sections hold UTF-8.

use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"DUALATT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub scalar_bytes: u8,
    pub sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new<S: Scalar>() -> Self {
        Checkpoint { scalar_bytes: S::BYTES as u8, sections: Vec::new() }
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        self.put(name, text.as_bytes().to_vec());
    }

    pub fn put_params<S: Scalar>(&mut self, name: &str, values: &[S]) {
        assert_eq!(S::BYTES as u8, self.scalar_bytes, "scalar width");
        let mut buf = Vec::with_capacity(values.len() * S::BYTES);
        for v in values {
            buf.extend_from_slice(&v.to_le_vec());
        }
        self.put(name, buf);
    }

    fn put(&mut self, name: &str, data: Vec<u8>) {
        self.sections.retain(|(n, _)| n != name);
        self.sections.push((name.to_string(), data));
    }

    pub fn section(&self, name: &str) -> Option<&[u8]> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, d)| d.as_slice())
    }

    pub fn text(&self, name: &str) -> Result<String> {
        let d = self.section(name).ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` section")))?;
        String::from_utf8(d.to_vec()).map_err(|_| Error::Format(format!("section `{name}` is not UTF-8")))
    }

    pub fn params<S: Scalar>(&self, name: &str) -> Result<Vec<S>> {
        if self.scalar_bytes as usize != S::BYTES {
            return Err(Error::Format(format!(
                "checkpoint stores {}-byte scalars, model uses {}-byte scalars",
                self.scalar_bytes,
                S::BYTES
            )));
        }
        let d = self.section(name).ok_or_else(|| Error::Format(format!("checkpoint has no `{name}` section")))?;
        if d.len() % S::BYTES != 0 {
            return Err(Error::Format(format!("section `{name}` has a partial scalar")));
        }
        Ok(d.chunks_exact(S::BYTES).map(S::from_le_slice).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.scalar_bytes);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, data) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let scalar_bytes = r.take(1)?[0];
        let n = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut sections = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("section name is not UTF-8".into()))?;
            let dlen = u64::from_le_bytes(r.take(8)?.try_into().unwrap()) as usize;
            sections.push((name, r.take(dlen)?.to_vec()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { scalar_bytes, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(io_err(path))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}
