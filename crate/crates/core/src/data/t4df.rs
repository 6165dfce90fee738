//! T4DF tensor container.
//!
//! ```text
//! offset  size      field
//! 0       4         magic "T4DF"
//! 4       1         version (1)
//! 5       1         dtype code (0 = f32, 1 = f64)
//! 6       1         rank (1..=6)
//! 7       8 * rank  extents, u64 little endian
//! ...     numel * w payload, little endian, C order
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::{DType, Real, Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"T4DF";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub dtype: DType,
    pub dims: Vec<usize>,
}

impl Header {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn header_len(&self) -> usize {
        7 + 8 * self.dims.len()
    }

    pub fn payload_len(&self) -> usize {
        self.numel() * self.dtype.size_of()
    }
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parses the header at the start of `bytes`.
pub fn decode_header(bytes: &[u8]) -> Result<Header, FormatError> {
    if bytes.len() < 7 {
        return Err(FormatError::Truncated {
            expected: 7,
            found: bytes.len(),
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if found != MAGIC {
        return Err(FormatError::BadMagic { expected: MAGIC, found });
    }
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion(bytes[4]));
    }
    let dtype = DType::from_code(bytes[5]).ok_or(FormatError::BadDType(bytes[5]))?;
    let rank = bytes[6];
    if rank == 0 || rank as usize > MAX_RANK {
        return Err(FormatError::BadRank(rank));
    }
    let need = 7 + 8 * rank as usize;
    if bytes.len() < need {
        return Err(FormatError::Truncated {
            expected: need,
            found: bytes.len(),
        });
    }
    let dims = bytes[7..need]
        .chunks_exact(8)
        .map(|c| {
            let d = u64::from_le_bytes(c.try_into().expect("chunk of 8"));
            match usize::try_from(d) {
                Ok(d) if d > 0 => Ok(d),
                _ => Err(FormatError::Malformed(format!("invalid extent {d}"))),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(dtype.size_of()))
        .ok_or_else(|| FormatError::Malformed("extents overflow".into()))?;
    Ok(Header {
        version: VERSION,
        dtype,
        dims,
    })
}

/// Decodes one tensor from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_prefix<T: Real>(bytes: &[u8]) -> Result<(Tensor<T>, usize), FormatError> {
    let h = decode_header(bytes)?;
    if h.dtype != T::DTYPE {
        return Err(FormatError::DTypeMismatch {
            expected: T::DTYPE.name(),
            found: h.dtype.name(),
        });
    }
    let start = h.header_len();
    let end = start + h.payload_len();
    if bytes.len() < end {
        return Err(FormatError::Truncated {
            expected: h.payload_len(),
            found: bytes.len() - start,
        });
    }
    let w = T::DTYPE.size_of();
    let data: Vec<T> = bytes[start..end].chunks_exact(w).map(T::read_le).collect();
    let t = Tensor::from_data(&h.dims, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
    Ok((t, end))
}

/// Decodes a buffer that holds exactly one tensor.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Tensor<T>, FormatError> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FormatError::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}

fn tag(path: &Path) -> impl FnOnce(FormatError) -> Error + '_ {
    move |source| Error::Format {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(tag(path))
}

/// Loads a tensor of either stored dtype, converting to `T`.
pub fn load_tensor_as<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = decode_header(&bytes).map_err(tag(path))?;
    match h.dtype {
        DType::F32 => Ok(decode::<f32>(&bytes).map_err(tag(path))?.cast()),
        DType::F64 => Ok(decode::<f64>(&bytes).map_err(tag(path))?.cast()),
    }
}

pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes).map_err(tag(path))
}
