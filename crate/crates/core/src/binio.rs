//! Little-endian framing shared by the embedding cache and the delta matrix
//! files: a magic string, a length-prefixed JSON header, then records.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn header<T: Serialize>(&mut self, header: &T) -> Result<()> {
        let json = serde_json::to_vec(header)?;
        self.u32(json.len() as u32);
        self.buf.extend_from_slice(&json);
        Ok(())
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Writes through a temporary file so readers never see a half-written file.
    pub fn persist(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("create {}", parent.display()), e))?;
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &self.buf).map_err(|e| Error::io(format!("write {}", tmp.display()), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("rename to {}", path.display()), e))
    }

    #[cfg(test)]
    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    path: PathBuf,
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(path: &Path, data: &'a [u8], magic: &[u8]) -> Result<Self> {
        let mut reader = Self {
            path: path.to_path_buf(),
            data,
            pos: 0,
        };
        let found = reader.take(magic.len())?;
        if found != magic {
            return Err(reader.corrupt_at(0, "bad magic string"));
        }
        Ok(reader)
    }

    pub fn corrupt_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(self.corrupt_at(
                self.pos,
                format!("truncated: need {n} bytes, {} left", self.data.len() - self.pos),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let bytes = self.take(4)?;
        Ok(u32::from_le_bytes(bytes.try_into().expect("4 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let bytes = self.take(8)?;
        Ok(f64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let start = self.pos;
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt_at(start, "invalid utf-8 string"))
    }

    pub fn header<T: DeserializeOwned>(&mut self) -> Result<T> {
        let start = self.pos;
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        serde_json::from_slice(bytes).map_err(|e| self.corrupt_at(start, format!("bad header: {e}")))
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("read {}", path.display()), e))
}
