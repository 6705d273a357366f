//! ETFC checkpoint format.
//!
//! ```text
//! "ETFC" | version u16 | meta_len u32 | meta (JSON, UTF-8)
//!        | f64 payload: per layer (weight, bias), classifier weight, bias,
//!          then frame M and P when present
//! crc32 u32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, Dense, MlpBackbone, Mode, Model, PrimedClassifier};
use crate::codec::{expect_magic, verify_crc, Reader, Writer};
use crate::error::{Error, Result};
use crate::etf::{EtfFrame, PrimeKind};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"ETFC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub mode: Mode,
    pub num_classes: usize,
    pub num_biases: usize,
    pub feature_dim: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Kind of the stored frame; `None` when the checkpoint has no primes.
    pub frame: Option<PrimeKind>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub frame: Option<EtfFrame>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, encode_checkpoint(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        decode_checkpoint(&fs::read(path)?)
    }

    /// Fails with a shape error unless the stored model has exactly `arch`.
    pub fn expect_architecture(&self, arch: &Architecture) -> Result<()> {
        let have = self.model.architecture();
        if &have != arch {
            return Err(Error::shape(format!(
                "checkpoint architecture {have:?} does not match {arch:?}"
            )));
        }
        Ok(())
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let arch = ckpt.model.architecture();
    if arch != ckpt.meta.architecture {
        return Err(Error::shape(format!(
            "metadata architecture {:?} disagrees with model {:?}",
            ckpt.meta.architecture, arch
        )));
    }
    if ckpt.meta.frame != ckpt.frame.as_ref().map(EtfFrame::kind) {
        return Err(Error::Format("metadata frame kind disagrees with the stored frame".into()));
    }
    let meta = serde_json::to_vec(&ckpt.meta)?;
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u32(meta.len() as u32);
    w.bytes(&meta);
    for s in ckpt.model.param_slices() {
        s.iter().for_each(|&x| w.f64(x));
    }
    if let Some(frame) = &ckpt.frame {
        frame.primes().data().iter().for_each(|&x| w.f64(x));
        frame.orthonormal_factor().data().iter().for_each(|&x| w.f64(x));
    }
    Ok(w.finish())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    expect_magic(bytes, MAGIC)?;
    let payload = verify_crc(bytes)?;
    let mut r = Reader::new(payload);
    r.take(4)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "ETFC version {version}, this build reads {VERSION}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let arch = &meta.architecture;
    arch.validate()?;

    let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        Matrix::from_vec(rows, cols, data)
    };
    let mut layers = Vec::with_capacity(arch.widths.len() - 1);
    for w in arch.widths.windows(2) {
        let weight = read_matrix(w[0], w[1])?;
        let bias = read_matrix(1, w[1])?.into_vec();
        layers.push(Dense { weight, bias });
    }
    let d = arch.feature_dim();
    let weight = read_matrix(d + arch.prime_dim, arch.num_classes)?;
    let bias = read_matrix(1, arch.num_classes)?.into_vec();
    let frame = match meta.frame {
        Some(kind) => {
            let m = read_matrix(meta.feature_dim, meta.num_biases)?;
            let p = read_matrix(meta.feature_dim, meta.num_biases)?;
            Some(EtfFrame::from_parts(kind, m, p)?)
        }
        None => None,
    };
    if r.remaining() != 0 {
        return Err(Error::Parse {
            offset: r.position() as u64,
            message: format!("{} unexpected bytes after the parameter payload", r.remaining()),
        });
    }
    Ok(Checkpoint {
        meta,
        model: Model {
            backbone: MlpBackbone { layers },
            classifier: PrimedClassifier {
                weight,
                bias,
                feature_dim: d,
            },
        },
        frame,
    })
}
