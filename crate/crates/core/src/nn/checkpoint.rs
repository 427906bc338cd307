//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CTXCRFCK"
//! version    u32
//! header     u64 length + UTF-8 text (module configs)
//! blocks     u64 count, then per block:
//!              u32 name length + UTF-8 name
//!              u32 rank + u64 extent per axis
//!              f64 values, row-major
//! ```

use std::io::{Read, Write};

use super::{Parameterized, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CTXCRFCK";
pub const FORMAT_VERSION: u32 = 1;

const MAX_NAME_LEN: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub header: String,
    pub blocks: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params<P: Parameterized + ?Sized>(header: String, params: &P) -> Self {
        let mut blocks = Vec::new();
        params.visit_params("", &mut |name, t, _| blocks.push((name.to_owned(), t.clone())));
        Checkpoint {
            version: FORMAT_VERSION,
            header,
            blocks,
        }
    }

    /// Copies every stored block into the matching parameter of `params`.
    /// Fails if a parameter has no block, a block has no parameter, or shapes differ.
    pub fn restore_into<P: Parameterized + ?Sized>(&self, params: &mut P) -> Result<()> {
        let mut used = vec![false; self.blocks.len()];
        let mut failure = None;
        params.visit_params_mut("", &mut |name, t, _| {
            if failure.is_some() {
                return;
            }
            match self.blocks.iter().position(|(n, _)| n == name) {
                Some(i) if self.blocks[i].1.shape() == t.shape() => {
                    t.data_mut().copy_from_slice(self.blocks[i].1.data());
                    used[i] = true;
                }
                Some(i) => {
                    failure = Some(Error::shape(
                        "checkpoint restore",
                        format!("{name} {:?}", t.shape()),
                        format!("{:?}", self.blocks[i].1.shape()),
                    ))
                }
                None => failure = Some(Error::format("checkpoint", format!("missing block `{name}`"))),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(i) = used.iter().position(|u| !u) {
            return Err(Error::format(
                "checkpoint",
                format!("unexpected block `{}`", self.blocks[i].0),
            ));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&(self.header.len() as u64).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&(self.blocks.len() as u64).to_le_bytes())?;
        for (name, t) in &self.blocks {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let header_len = read_u64(&mut r)?;
        let header = read_string(&mut r, header_len)?;
        let count = read_u64(&mut r)?;
        let mut blocks = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)?;
            if name_len > MAX_NAME_LEN {
                return Err(Error::format("checkpoint", "block name too long"));
            }
            let name = read_string(&mut r, u64::from(name_len))?;
            let rank = read_u32(&mut r)?;
            if rank > MAX_RANK {
                return Err(Error::format("checkpoint", format!("rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format("checkpoint", "block extent overflow"))?;
            let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "block too large"))?];
            read_exact(&mut r, &mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            blocks.push((name, Tensor::new(shape, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::format("checkpoint", e.to_string()))? != 0 {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint { version, header, blocks })
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: u64) -> Result<String> {
    let mut buf = Vec::new();
    r.take(len)
        .read_to_end(&mut buf)
        .map_err(|e| Error::format("checkpoint", e.to_string()))?;
    if buf.len() as u64 != len {
        return Err(Error::format("checkpoint", "truncated string"));
    }
    String::from_utf8(buf).map_err(|_| Error::format("checkpoint", "invalid UTF-8"))
}
