//! Little-endian binary blob encoding shared by all checkpoint formats.
//!
//! Lengths and counts are u64 LE, reals are f64 LE. A tensor blob is
//! `name_len, name, rank, dims.., values..`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub struct BlobWriter<W: Write> {
    inner: W,
}

impl<W: Write> BlobWriter<W> {
    pub fn new(inner: W) -> Self {
        BlobWriter { inner }
    }

    pub fn magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        self.inner.write_all(magic)?;
        Ok(())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.u64(s.len() as u64)?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn ids(&mut self, ids: &[usize]) -> Result<()> {
        self.u64(ids.len() as u64)?;
        ids.iter().try_for_each(|&i| self.u64(i as u64))
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.str(name)?;
        self.u64(t.shape().len() as u64)?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        t.data.iter().try_for_each(|&v| self.f64(v))
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub struct BlobReader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> BlobReader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        BlobReader { inner, what }
    }

    fn bad(&self, detail: impl Into<String>) -> Error {
        Error::format(self.what, detail)
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.bad(format!("truncated: {e}")))?;
        Ok(buf)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.bytes::<8>()?;
        if &got != magic {
            return Err(self.bad(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes::<8>()?))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.bad(format!("length {v} too large")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        if n > 1 << 20 {
            return Err(self.bad(format!("string length {n} implausible")));
        }
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| self.bad(format!("truncated: {e}")))?;
        String::from_utf8(buf).map_err(|_| self.bad("name is not utf-8"))
    }

    pub fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.usize()?;
        (0..n).map(|_| self.usize()).collect()
    }

    /// Reads a tensor blob and checks its name and shape against `expected`.
    pub fn tensor_like(&mut self, expected_name: &str, expected: &Tensor) -> Result<Tensor> {
        let name = self.str()?;
        if name != expected_name {
            return Err(self.bad(format!("expected blob {expected_name:?}, found {name:?}")));
        }
        let rank = self.usize()?;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        if shape != expected.shape() {
            return Err(self.bad(format!(
                "blob {name:?} has shape {shape:?}, architecture requires {:?}",
                expected.shape()
            )));
        }
        let data = (0..expected.numel()).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        let mut t = Tensor::from_vec(&shape, data)?;
        t.requires_grad = expected.requires_grad;
        Ok(t)
    }

    /// Loads blobs in order into the given templates.
    pub fn fill(&mut self, named: Vec<(String, &mut Tensor)>) -> Result<()> {
        for (name, slot) in named {
            let t = self.tensor_like(&name, slot)?;
            slot.data = t.data;
        }
        Ok(())
    }

    pub fn expect_end(&mut self) -> Result<()> {
        let mut buf = [0u8; 1];
        match self.inner.read(&mut buf)? {
            0 => Ok(()),
            _ => Err(self.bad("trailing bytes after last section")),
        }
    }
}
