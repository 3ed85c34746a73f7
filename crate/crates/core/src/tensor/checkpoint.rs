//! Binary checkpoint format.
//!
//! ```text
//! magic      5 bytes  "MFDK1"
//! version    u32 LE   (1)
//! count      u64 LE   number of tensor records
//! record*    name_len u32 LE, name (UTF-8), rank u32 LE,
//!            dims u64 LE × rank, payload f64 LE × prod(dims)
//! trailer?   len u64 LE, UTF-8 text (absent when the file ends after
//!            the last record)
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MFDK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub trailer: Option<String>,
}

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)], trailer: Option<&str>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u32::try_from(bytes.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor name too long: {}", bytes.len())))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    if let Some(text) = trailer {
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Parse(format!("truncated checkpoint while reading {}: {}", what, e)))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8, what)?.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let magic = read_exact(&mut r, 5, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse("not a checkpoint: bad magic".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {}", version)));
    }
    let count = read_u64(&mut r, "record count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r, "name length")? as usize;
        let name = String::from_utf8(read_exact(&mut r, len, "name")?)
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r, "dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = read_exact(&mut r, numel * 8, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let trailer = if rest.is_empty() {
        None
    } else {
        if rest.len() < 8 {
            return Err(Error::Parse("truncated trailer length".into()));
        }
        let len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        if rest.len() != 8 + len {
            return Err(Error::Parse(format!(
                "trailer declares {} bytes but {} follow",
                len,
                rest.len() - 8
            )));
        }
        Some(
            String::from_utf8(rest[8..].to_vec())
                .map_err(|_| Error::Parse("trailer is not UTF-8".into()))?,
        )
    };
    Ok(Checkpoint { tensors, trailer })
}
