//! Shared little-endian framing for model checkpoints.
//!
//! Every checkpoint starts with a 4-byte magic and a `u32` version, followed by
//! a `u32` flags word (bit 0: a training-state section is appended), then
//! format-specific header fields and the float32 weight blob. The optional
//! training state stores exact f64 parameters plus optimizer moments so a
//! resumed run continues bit-identically.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::Adam;

pub(crate) const FLAG_TRAINING_STATE: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::BadCheckpoint(e.to_string())
}

pub(crate) struct CkptWriter<W: Write> {
    w: W,
}

impl<W: Write> CkptWriter<W> {
    pub fn new(mut w: W, magic: &[u8; 4], version: u32, flags: u32) -> Result<Self> {
        w.write_all(magic).map_err(io_err)?;
        w.write_u32::<LittleEndian>(version).map_err(io_err)?;
        w.write_u32::<LittleEndian>(flags).map_err(io_err)?;
        Ok(Self { w })
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.w.write_u32::<LittleEndian>(v).map_err(io_err)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.w.write_u64::<LittleEndian>(v).map_err(io_err)
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.w.write_f64::<LittleEndian>(v).map_err(io_err)
    }

    pub fn f32s(&mut self, vs: &[f64]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        for v in vs {
            self.w.write_f32::<LittleEndian>(*v as f32).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        self.u64(vs.len() as u64)?;
        for v in vs {
            self.w.write_f64::<LittleEndian>(*v).map_err(io_err)?;
        }
        Ok(())
    }

    /// Exact parameters followed by Adam moments and step count.
    pub fn training_state(&mut self, params: &[f64], opt: &Adam, step: u64) -> Result<()> {
        self.u64(step)?;
        self.f64s(params)?;
        self.f64s(&opt.m)?;
        self.f64s(&opt.v)?;
        self.u64(opt.t)
    }

    pub fn finish(mut self) -> Result<W> {
        self.w.flush().map_err(io_err)?;
        Ok(self.w)
    }
}

pub(crate) struct CkptReader<R: Read> {
    r: R,
    pub flags: u32,
}

pub(crate) struct TrainingState {
    pub step: u64,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl<R: Read> CkptReader<R> {
    pub fn new(mut r: R, magic: &[u8; 4], version: u32) -> Result<Self> {
        let mut m = [0u8; 4];
        r.read_exact(&mut m).map_err(io_err)?;
        if &m != magic {
            return Err(Error::BadCheckpoint(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&m)
            )));
        }
        let v = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if v != version {
            return Err(Error::BadCheckpoint(format!("unsupported version {v}")));
        }
        let flags = r.read_u32::<LittleEndian>().map_err(io_err)?;
        Ok(Self { r, flags })
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.r.read_u32::<LittleEndian>().map_err(io_err)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.r.read_u64::<LittleEndian>().map_err(io_err)
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.r.read_f64::<LittleEndian>().map_err(io_err)
    }

    fn len(&mut self, expected: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n != expected {
            return Err(Error::BadCheckpoint(format!("blob length {n}, expected {expected}")));
        }
        Ok(n)
    }

    pub fn f32s(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.len(expected)?;
        (0..n)
            .map(|_| self.r.read_f32::<LittleEndian>().map(f64::from).map_err(io_err))
            .collect()
    }

    pub fn f64s(&mut self, expected: usize) -> Result<Vec<f64>> {
        let n = self.len(expected)?;
        (0..n)
            .map(|_| self.r.read_f64::<LittleEndian>().map_err(io_err))
            .collect()
    }

    pub fn training_state(&mut self, n_params: usize) -> Result<Option<TrainingState>> {
        if self.flags & FLAG_TRAINING_STATE == 0 {
            return Ok(None);
        }
        let step = self.u64()?;
        let params = self.f64s(n_params)?;
        let m = self.f64s(n_params)?;
        let v = self.f64s(n_params)?;
        let t = self.u64()?;
        Ok(Some(TrainingState {
            step,
            params,
            m,
            v,
            t,
        }))
    }
}
