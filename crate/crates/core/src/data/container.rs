//! ETFD dataset container.
//!
//! ```text
//! "ETFD" | version u16 | n u64 | d_in u32 | K u16 | B u16
//!        | ratio_num u32 | ratio_den u32 | split u8
//! n × ( d_in × f32 | label u16 | bias u16 | aligned u8 )
//! crc32 u32
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::{BiasRatio, BiasedDataset, Sample, Split};
use crate::codec::{expect_magic, verify_crc, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ETFD";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 4 + 2 + 2 + 4 + 4 + 1;

pub fn encode_dataset(ds: &BiasedDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let d_in = u32::try_from(ds.input_dim).map_err(|_| Error::config("input dim too large"))?;
    let k = u16::try_from(ds.num_classes).map_err(|_| Error::config("too many classes"))?;
    let b = u16::try_from(ds.num_biases).map_err(|_| Error::config("too many bias attributes"))?;
    let record = ds.input_dim * 4 + 5;
    let mut w = Writer::with_capacity(HEADER_LEN + ds.len() * record + 4);
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u64(ds.len() as u64);
    w.u32(d_in);
    w.u16(k);
    w.u16(b);
    w.u32(ds.ratio.num);
    w.u32(ds.ratio.den);
    w.u8(ds.split.code());
    for s in &ds.samples {
        for &v in &s.x {
            w.f32(v);
        }
        w.u16(s.label as u16);
        w.u16(s.bias as u16);
        w.u8(u8::from(s.aligned));
    }
    Ok(w.finish())
}

pub fn decode_dataset(bytes: &[u8]) -> Result<BiasedDataset> {
    expect_magic(bytes, MAGIC)?;
    // Header fields are parsed before the CRC so that truncation is reported
    // as such rather than as a checksum failure.
    let mut r = Reader::new(bytes);
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "ETFD version {version}, this build reads {VERSION}"
        )));
    }
    let n = r.u64()? as usize;
    let input_dim = r.u32()? as usize;
    let num_classes = r.u16()? as usize;
    let num_biases = r.u16()? as usize;
    let ratio = BiasRatio {
        num: r.u32()?,
        den: r.u32()?,
    };
    let split_code = r.u8()?;
    let split = Split::from_code(split_code)
        .ok_or_else(|| Error::Format(format!("unknown split code {split_code}")))?;

    let record = input_dim * 4 + 5;
    let expected = n
        .checked_mul(record)
        .and_then(|p| p.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::Format("ETFD record count overflows".into()))?;
    if bytes.len() < expected {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            message: format!(
                "truncated ETFD file: header declares {expected} bytes, found {}",
                bytes.len()
            ),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Parse {
            offset: expected as u64,
            message: format!("{} trailing bytes after ETFD payload", bytes.len() - expected),
        });
    }
    let payload = verify_crc(bytes)?;
    let mut r = Reader::new(&payload[HEADER_LEN..]);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut x = Vec::with_capacity(input_dim);
        for _ in 0..input_dim {
            x.push(r.f32()?);
        }
        let label = r.u16()? as usize;
        let bias = r.u16()? as usize;
        let aligned = match r.u8()? {
            0 => false,
            1 => true,
            v => {
                return Err(Error::Parse {
                    offset: (HEADER_LEN + r.position() - 1) as u64,
                    message: format!("aligned flag {v} is not 0/1"),
                })
            }
        };
        samples.push(Sample {
            x,
            label,
            bias,
            aligned,
        });
    }
    let ds = BiasedDataset {
        samples,
        num_classes,
        num_biases,
        input_dim,
        ratio,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &BiasedDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<BiasedDataset> {
    decode_dataset(&fs::read(path)?)
}
