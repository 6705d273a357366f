//! Biased datasets: samples carrying a class label, a bias attribute, and
//! whether the two agree.
//!
//! Class `k` is correlated with bias attribute `b = k`. A sample is
//! *aligned* when `b == k` and *conflicting* otherwise.

mod colored_mnist;
mod container;
mod idx;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use colored_mnist::{build_colored_mnist, default_palette, MNIST_SIDE};
pub use container::{decode_dataset, encode_dataset, read_dataset, write_dataset};
pub use idx::{encode_idx, parse_idx, parse_idx_bytes, IdxArray};
pub use synthetic::{gen_two_signal, gen_unbiased_test, TwoSignalParams};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub(crate) fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Exact fraction of conflicting samples, stored as `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasRatio {
    pub num: u32,
    pub den: u32,
}

impl BiasRatio {
    const DEFAULT_DEN: u32 = 1_000_000;

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || 2 * u64::from(num) > u64::from(den) {
            return Err(Error::config(format!(
                "bias ratio {num}/{den} must lie in (0, 0.5]"
            )));
        }
        Ok(Self { num, den })
    }

    /// Rounds `rho` to a multiple of 1e-6.
    pub fn from_f64(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 0.5) {
            return Err(Error::config(format!("bias ratio {rho} must lie in (0, 0.5]")));
        }
        let num = (rho * f64::from(Self::DEFAULT_DEN)).round() as u32;
        Self::new(num, Self::DEFAULT_DEN)
    }

    pub fn value(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// `⌈ρ·n⌉`, exact.
    pub fn conflicting_count(self, n: usize) -> usize {
        let num = u64::from(self.num) * n as u64;
        num.div_ceil(u64::from(self.den)) as usize
    }

}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Vec<f32>,
    pub label: usize,
    pub bias: usize,
    pub aligned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasedDataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub num_biases: usize,
    pub input_dim: usize,
    pub ratio: BiasRatio,
    pub split: Split,
}

impl BiasedDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Gathers the inputs of `indices` into a row-per-sample `f64` matrix.
    pub fn inputs(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            data.extend(self.samples[i].x.iter().map(|&v| f64::from(v)));
        }
        Matrix::from_vec(indices.len(), self.input_dim, data).expect("consistent input dims")
    }

    /// `(aligned, conflicting)` counts per class.
    pub fn counts_per_class(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(0, 0); self.num_classes];
        for s in &self.samples {
            if s.aligned {
                out[s.label].0 += 1;
            } else {
                out[s.label].1 += 1;
            }
        }
        out
    }

    pub fn conflicting_total(&self) -> usize {
        self.samples.iter().filter(|s| !s.aligned).count()
    }

    /// Structural checks: dimensions, index ranges, and the aligned flag.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != self.input_dim {
                return Err(Error::shape(format!(
                    "sample {i} has {} inputs, expected {}",
                    s.x.len(),
                    self.input_dim
                )));
            }
            if s.label >= self.num_classes || s.bias >= self.num_biases {
                return Err(Error::Format(format!(
                    "sample {i} has label {} / bias {} outside {}x{}",
                    s.label, s.bias, self.num_classes, self.num_biases
                )));
            }
            if s.aligned != (s.bias == s.label) {
                return Err(Error::Format(format!(
                    "sample {i} aligned flag disagrees with label {} / bias {}",
                    s.label, s.bias
                )));
            }
        }
        Ok(())
    }
}

/// Picks a bias attribute uniformly from `[0, num_biases) \ {label}`.
pub(crate) fn conflicting_bias(label: usize, num_biases: usize, draw: usize) -> usize {
    debug_assert!(draw < num_biases - 1);
    if draw >= label {
        draw + 1
    } else {
        draw
    }
}
