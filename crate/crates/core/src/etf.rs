//! Simplex equiangular tight frames used as fixed prime features.
//!
//! A frame over `B` vertices in `R^d` is
//! `M = sqrt(B/(B-1)) · P · (I_B - (1/B)·1 1ᵀ)` with `PᵀP = I_B`, so every
//! column has unit norm and every pair of columns has inner product
//! `-1/(B-1)`. Frames are sampled once and never updated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, qr_orthonormal, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimeKind {
    Etf,
    /// Unit-normalized Gaussian columns (ablation); not an ETF.
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtfFrame {
    kind: PrimeKind,
    m: Matrix,
    p: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EtfReport {
    pub max_gram_error: f64,
    pub ok: bool,
}

impl EtfFrame {
    /// Samples `P` from `rng` and builds the frame.
    pub fn build(dim: usize, num_vertices: usize, rng: &mut Rng) -> Result<Self> {
        check_dims(dim, num_vertices)?;
        let g = rng.normal_matrix(dim, num_vertices);
        let p = qr_orthonormal(&g)?;
        Self::from_orthonormal(p)
    }

    /// Builds the frame from a given orthonormal factor `P` (d×B).
    pub fn from_orthonormal(p: Matrix) -> Result<Self> {
        let (dim, b) = p.shape();
        check_dims(dim, b)?;
        let centering = centering_matrix(b);
        let m = p
            .matmul(&centering)?
            .scale((b as f64 / (b as f64 - 1.0)).sqrt());
        Ok(Self {
            kind: PrimeKind::Etf,
            m,
            p,
        })
    }

    /// Random-prime ablation: independent Gaussian columns scaled to unit norm.
    pub fn random_primes(dim: usize, num_vertices: usize, rng: &mut Rng) -> Result<Self> {
        check_dims(dim, num_vertices)?;
        let mut m = rng.normal_matrix(dim, num_vertices);
        for j in 0..num_vertices {
            let mut col = m.column(j);
            let n = norm(&col);
            if n < 1e-12 {
                return Err(Error::DegenerateDraw { column: j, norm: n });
            }
            col.iter_mut().for_each(|x| *x /= n);
            m.set_column(j, &col);
        }
        Ok(Self {
            kind: PrimeKind::Random,
            p: m.clone(),
            m,
        })
    }

    /// Reassembles a frame from stored parts without re-deriving anything.
    pub fn from_parts(kind: PrimeKind, m: Matrix, p: Matrix) -> Result<Self> {
        if m.shape() != p.shape() {
            return Err(Error::shape(format!(
                "frame M {:?} vs P {:?}",
                m.shape(),
                p.shape()
            )));
        }
        Ok(Self { kind, m, p })
    }

    pub fn kind(&self) -> PrimeKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn num_vertices(&self) -> usize {
        self.m.cols()
    }

    /// The d×B prime matrix `M`.
    pub fn primes(&self) -> &Matrix {
        &self.m
    }

    /// The orthonormal factor `P`.
    pub fn orthonormal_factor(&self) -> &Matrix {
        &self.p
    }

    /// Column `m_b`, by value.
    pub fn prime(&self, b: usize) -> Result<Vec<f64>> {
        if b >= self.num_vertices() {
            return Err(Error::Index {
                index: b,
                len: self.num_vertices(),
            });
        }
        Ok(self.m.column(b))
    }

    pub fn validate(&self, tol: f64) -> EtfReport {
        let b = self.num_vertices();
        let max_gram_error = match self.m.t_matmul(&self.m) {
            Ok(gram) if b >= 2 => gram
                .sub(&gram_target(b))
                .map(|d| d.max_abs())
                .unwrap_or(f64::INFINITY),
            _ => f64::INFINITY,
        };
        EtfReport {
            max_gram_error,
            ok: max_gram_error <= tol,
        }
    }

    /// Mutable access for tests and fault injection.
    #[doc(hidden)]
    pub fn primes_mut(&mut self) -> &mut Matrix {
        &mut self.m
    }

    /// CRC32 over the little-endian bytes of `M`; used as a frame fingerprint.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for x in self.m.data() {
            h.update(&x.to_le_bytes());
        }
        h.finalize()
    }
}

/// The all-zero prime used for unbiased classification.
pub fn null_prime(dim: usize) -> Vec<f64> {
    vec![0.0; dim]
}

/// `(B/(B-1)) · (I_B - (1/B)·1 1ᵀ)`, the Gram matrix of any simplex ETF.
pub fn gram_target(b: usize) -> Matrix {
    let bf = b as f64;
    centering_matrix(b).scale(bf / (bf - 1.0))
}

fn centering_matrix(b: usize) -> Matrix {
    let inv = 1.0 / b as f64;
    Matrix::from_fn(b, b, |i, j| if i == j { 1.0 - inv } else { -inv })
}

fn check_dims(dim: usize, b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::config(format!(
            "a prime frame needs at least 2 vertices, got {b}"
        )));
    }
    if dim < b {
        return Err(Error::config(format!(
            "frame dimension {dim} is smaller than the vertex count {b}"
        )));
    }
    Ok(())
}
