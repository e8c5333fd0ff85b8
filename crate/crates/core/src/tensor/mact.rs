//! MACT container: `"MACT"`, version u8, dtype u8, two reserved zero bytes,
//! u32 ndim, ndim u32 extents, then the row-major payload. Little-endian.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MACT";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Appends the MACT encoding of `t` to `out`.
pub fn write_mact_bytes(t: &Tensor, dtype: DType, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

/// Decodes one MACT tensor from the front of `bytes`, returning it with the
/// number of bytes consumed. `origin` only labels errors.
pub fn read_mact_bytes(bytes: &[u8], origin: &Path) -> Result<(Tensor, usize)> {
    let fail = |reason: String| Error::Format {
        path: origin.to_path_buf(),
        reason,
    };
    if bytes.len() < 12 {
        return Err(fail("truncated MACT header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad MACT magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(fail(format!("unsupported MACT version {}", bytes[4])));
    }
    let dtype =
        DType::from_code(bytes[5]).ok_or_else(|| fail(format!("unknown dtype code {}", bytes[5])))?;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(fail("reserved header bytes are not zero".into()));
    }
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    if bytes.len() < pos + 4 * ndim {
        return Err(fail("truncated MACT extents".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let need = n * dtype.width();
    if bytes.len() < pos + need {
        return Err(fail(format!(
            "truncated MACT payload: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    let payload = &bytes[pos..pos + need];
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| fail(e.to_string()))?;
    Ok((t, pos + need))
}

pub fn write_mact(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_mact_bytes(t, dtype, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_mact(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let (t, used) = read_mact_bytes(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes after MACT payload", bytes.len() - used),
        });
    }
    Ok(t)
}
