use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded unsigned-byte IDX tensor (the MNIST distribution format).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn len(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes of item `i` (one image, or one label).
    pub fn item(&self, i: usize) -> &[u8] {
        let stride: usize = self.dims[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }
}

pub fn parse_idx(path: impl AsRef<Path>) -> Result<IdxArray> {
    parse_idx_bytes(&fs::read(path)?)
}

/// Header: `0x00 0x00 0x08 ndim`, then `ndim` big-endian u32 sizes, then the
/// payload. Only u8 payloads with 1 or 3 dimensions are accepted.
pub fn parse_idx_bytes(bytes: &[u8]) -> Result<IdxArray> {
    let err = |offset: usize, message: String| Error::Parse {
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "truncated IDX magic".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("bad IDX magic {:02x?}", &bytes[..4])));
    }
    if bytes[2] != 0x08 {
        return Err(err(2, format!("unsupported IDX type code {:#04x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim != 1 && ndim != 3 {
        return Err(err(3, format!("unsupported IDX dimension count {ndim}")));
    }
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(err(bytes.len(), "truncated IDX dimension list".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
        })
        .collect();
    let declared = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(4, "IDX dimensions overflow".into()))?;
    let actual = bytes.len() - header_len;
    if declared != actual {
        return Err(err(
            header_len,
            format!("IDX payload declares {declared} bytes but {actual} are present"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header_len..].to_vec(),
    })
}

/// Encodes an IDX u8 tensor. Used by tests and fixture tooling.
pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, arr.dims.len() as u8];
    for &d in &arr.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}
