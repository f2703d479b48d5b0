//! The `R2HT` tensor container.
//!
//! Layout, all little-endian: magic `R2HT`, version `0x01`, dtype byte
//! (`0x01` f32, `0x02` f64), rank byte, `rank` × u32 dims, row-major payload.

use std::fs;
use std::path::Path;

use r2h_tensor::Tensor;

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"R2HT";
pub const VERSION: u8 = 0x01;
pub const MAX_RANK: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Self::F32 => 0x01,
            Self::F64 => 0x02,
        }
    }

    pub fn from_code(code: u8) -> std::result::Result<Self, FormatError> {
        match code {
            0x01 => Ok(Self::F32),
            0x02 => Ok(Self::F64),
            other => Err(FormatError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let shape = tensor.shape();
    assert!(
        (1..=MAX_RANK as usize).contains(&shape.len()),
        "R2HT holds tensors of rank 1..=4, got {shape:?}"
    );
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + dtype.size() * tensor.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).expect("dimension exceeds u32");
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => tensor.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => tensor.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> std::result::Result<&'a [u8], FormatError> {
    let end = *at + n;
    if end > bytes.len() {
        return Err(FormatError::Truncated {
            expected: end,
            actual: bytes.len(),
        });
    }
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Tensor, Dtype), FormatError> {
    let mut at = 0;
    let magic: [u8; 4] = take(bytes, &mut at, 4)?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let head = take(bytes, &mut at, 3)?;
    if head[0] != VERSION {
        return Err(FormatError::UnsupportedVersion(head[0]));
    }
    let dtype = Dtype::from_code(head[1])?;
    let rank = head[2];
    if rank == 0 || rank > MAX_RANK {
        return Err(FormatError::BadRank(rank));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let d = take(bytes, &mut at, 4)?;
        shape.push(u32::from_le_bytes(d.try_into().expect("4 bytes")) as usize);
    }
    let count: usize = shape.iter().product();
    let payload = take(bytes, &mut at, count * dtype.size())?;
    if at != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - at));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let tensor = Tensor::new(&shape, data).expect("payload length matches shape");
    Ok((tensor, dtype))
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    if !(1..=MAX_RANK as usize).contains(&tensor.rank()) {
        return Err(Error::invalid(format!(
            "{}: R2HT holds tensors of rank 1..=4, got {:?}",
            path.display(),
            tensor.shape()
        )));
    }
    fs::write(path, encode(tensor, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map(|(t, _)| t).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = encode(&t, Dtype::F32);
        assert_eq!(bytes.len(), 4 + 1 + 1 + 1 + 2 * 4 + 6 * 4);
        assert_eq!(&bytes[..7], b"R2HT\x01\x01\x02");
        assert_eq!(&bytes[7..15], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[15..19], &1f32.to_le_bytes());
    }

    #[test]
    fn distinct_errors() {
        let t = Tensor::from_fn(&[3], |i| i as f64);
        let good = encode(&t, Dtype::F64);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode(&bad).unwrap_err(), FormatError::UnsupportedVersion(2));
        let mut bad = good.clone();
        bad[5] = 9;
        assert_eq!(decode(&bad).unwrap_err(), FormatError::UnsupportedDtype(9));
        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long).unwrap_err(), FormatError::TrailingBytes(1));
    }
}
