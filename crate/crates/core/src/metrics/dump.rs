//! ETFF feature dumps.
//!
//! ```text
//! "ETFF" | n u64 | d u32 | K u16 | flags u16
//! n × ( d × f32 | label u16 | bias u16 | aligned u8 )
//! crc32 u32
//! ```

use std::fs;
use std::path::Path;

use crate::codec::{expect_magic, verify_crc, Reader, Writer};
use crate::data::BiasedDataset;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"ETFF";
const HEADER_LEN: usize = 4 + 8 + 4 + 2 + 2;

/// Set when the features were extracted from a test split.
pub const FLAG_TEST_SPLIT: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDump {
    /// `n × d`, one row per sample. Stored as `f32`.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub biases: Vec<usize>,
    pub aligned: Vec<bool>,
    pub num_classes: usize,
    pub flags: u16,
}

impl FeatureDump {
    /// Pairs features with the bookkeeping of `ds`.
    pub fn from_dataset(features: Matrix, ds: &BiasedDataset, flags: u16) -> Result<Self> {
        if features.rows() != ds.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} samples",
                features.rows(),
                ds.len()
            )));
        }
        Ok(Self {
            features,
            labels: ds.samples.iter().map(|s| s.label).collect(),
            biases: ds.samples.iter().map(|s| s.bias).collect(),
            aligned: ds.samples.iter().map(|s| s.aligned).collect(),
            num_classes: ds.num_classes,
            flags,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, encode_features(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        decode_features(&fs::read(path)?)
    }
}

pub fn encode_features(dump: &FeatureDump) -> Result<Vec<u8>> {
    let (n, d) = dump.features.shape();
    if dump.labels.len() != n || dump.biases.len() != n || dump.aligned.len() != n {
        return Err(Error::shape("feature dump columns disagree on length"));
    }
    let k = u16::try_from(dump.num_classes).map_err(|_| Error::config("too many classes"))?;
    let d32 = u32::try_from(d).map_err(|_| Error::config("feature dim too large"))?;
    let mut w = Writer::with_capacity(HEADER_LEN + n * (4 * d + 5) + 4);
    w.bytes(MAGIC);
    w.u64(n as u64);
    w.u32(d32);
    w.u16(k);
    w.u16(dump.flags);
    for i in 0..n {
        for &v in dump.features.row(i) {
            w.f32(v as f32);
        }
        let (label, bias) = (dump.labels[i], dump.biases[i]);
        if label >= dump.num_classes || bias > usize::from(u16::MAX) {
            return Err(Error::Format(format!("record {i}: label {label} / bias {bias} out of range")));
        }
        w.u16(label as u16);
        w.u16(bias as u16);
        w.u8(u8::from(dump.aligned[i]));
    }
    Ok(w.finish())
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureDump> {
    expect_magic(bytes, MAGIC)?;
    let mut r = Reader::new(bytes);
    r.take(4)?;
    let n = r.u64()? as usize;
    let d = r.u32()? as usize;
    let num_classes = r.u16()? as usize;
    let flags = r.u16()?;
    let expected = n
        .checked_mul(4 * d + 5)
        .and_then(|p| p.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::Format("ETFF record count overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected) as u64,
            message: format!(
                "ETFF header declares {expected} bytes, file has {}{}",
                bytes.len(),
                if bytes.len() < expected { " (truncated)" } else { "" }
            ),
        });
    }
    let payload = verify_crc(bytes)?;
    let mut r = Reader::new(&payload[HEADER_LEN..]);
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    let mut aligned = Vec::with_capacity(n);
    for i in 0..n {
        for _ in 0..d {
            data.push(f64::from(r.f32()?));
        }
        let label = r.u16()? as usize;
        if label >= num_classes {
            return Err(Error::Format(format!("record {i}: label {label} >= K={num_classes}")));
        }
        labels.push(label);
        biases.push(r.u16()? as usize);
        aligned.push(match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("record {i}: aligned flag {v} is not 0/1"))),
        });
    }
    Ok(FeatureDump {
        features: Matrix::from_vec(n, d, data)?,
        labels,
        biases,
        aligned,
        num_classes,
        flags,
    })
}
