//! Flat binary kernel format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "NRMF"
//! 4       4     version, u32 LE
//! 8       16    dims D_h, D_w, S, T, u32 LE each
//! 24      8·n   entries, f64 LE, storage order
//! ```

use std::io::{Read, Write};

use super::Tensor4;
use crate::error::{Error, Result};

pub const KERNEL_MAGIC: &[u8; 4] = b"NRMF";
pub const KERNEL_FORMAT_VERSION: u32 = 1;

pub fn write_tensor4<W: Write>(mut w: W, k: &Tensor4) -> Result<()> {
    w.write_all(KERNEL_MAGIC)?;
    w.write_all(&KERNEL_FORMAT_VERSION.to_le_bytes())?;
    for d in k.dims() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(k.len() * 8);
    for v in k.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor4<R: Read>(mut r: R) -> Result<Tensor4> {
    let mut header = [0u8; 24];
    read_exact(&mut r, &mut header, "kernel header")?;
    if &header[0..4] != KERNEL_MAGIC {
        return Err(Error::Format(format!("bad kernel magic {:?}", &header[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != KERNEL_FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported kernel format version {version}")));
    }
    let dims = [word(8) as usize, word(12) as usize, word(16) as usize, word(20) as usize];
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("kernel dims {dims:?} overflow")))?;
    let mut body = vec![0u8; n * 8];
    read_exact(&mut r, &mut body, "kernel body")?;
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor4::from_vec(dims, data)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}
