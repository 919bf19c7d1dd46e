//! Little-endian binary helpers shared by the trace, adapter and cache formats.

use std::io::{ErrorKind, Read, Write};

use half::f16;

use crate::error::{Error, Result};

/// A reader that tracks its byte offset so format errors can point at it.
pub struct ByteReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> ByteReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// Fills `buf` or fails with a truncation error at the current offset.
    pub fn read_exact(&mut self, buf: &mut [u8]) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => Err(Error::format(
                self.offset,
                format!("truncated input: needed {} more bytes", buf.len()),
            )),
            Err(e) => Err(e.into()),
        }
    }

    /// True when no bytes remain.
    pub fn at_eof(&mut self) -> Result<bool> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(true),
                Ok(_) => return Ok(false),
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub fn read_u32<R: Read>(r: &mut ByteReader<R>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_f32<R: Read>(r: &mut ByteReader<R>) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_f16<R: Read>(r: &mut ByteReader<R>) -> Result<f64> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(f16::from_le_bytes(b).to_f64())
}

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f16<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&f16::from_f64(v).to_le_bytes())?;
    Ok(())
}

/// Rounds through the 16-bit storage format.
pub fn round_to_f16(v: f64) -> f64 {
    f16::from_f64(v).to_f64()
}
