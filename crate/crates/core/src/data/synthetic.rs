use serde::{Deserialize, Serialize};

use super::{conflicting_bias, BiasRatio, BiasedDataset, Sample, Split};
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Two-signal generator: an input carries a weak one-hot "core" block for the
/// class, a strong one-hot "bias" block for the bias attribute, and pure noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoSignalParams {
    pub num_classes: usize,
    pub n_per_class: usize,
    pub ratio: f64,
    pub mu_core: f64,
    pub mu_bias: f64,
    pub sigma: f64,
    pub noise_dim: usize,
}

impl Default for TwoSignalParams {
    fn default() -> Self {
        Self {
            num_classes: 10,
            n_per_class: 500,
            ratio: 0.01,
            mu_core: 1.0,
            mu_bias: 3.0,
            sigma: 0.5,
            noise_dim: 20,
        }
    }
}

impl TwoSignalParams {
    pub fn input_dim(&self) -> usize {
        2 * self.num_classes + self.noise_dim
    }

    fn check_signal(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("two-signal data needs at least 2 classes"));
        }
        if !(self.mu_bias > self.mu_core && self.mu_core > 0.0) {
            return Err(Error::config(format!(
                "need mu_bias > mu_core > 0, got mu_core={} mu_bias={}",
                self.mu_core, self.mu_bias
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::config("sigma must be nonnegative"));
        }
        Ok(())
    }

    fn sample(&self, label: usize, bias: usize, rng: &mut Rng) -> Sample {
        let k = self.num_classes;
        let mut x = Vec::with_capacity(self.input_dim());
        for j in 0..k {
            let mean = if j == label { self.mu_core } else { 0.0 };
            x.push((mean + self.sigma * rng.normal()) as f32);
        }
        for j in 0..k {
            let mean = if j == bias { self.mu_bias } else { 0.0 };
            x.push((mean + self.sigma * rng.normal()) as f32);
        }
        for _ in 0..self.noise_dim {
            x.push((self.sigma * rng.normal()) as f32);
        }
        Sample {
            x,
            label,
            bias,
            aligned: label == bias,
        }
    }

    fn generate(
        &self,
        n_per_class: usize,
        n_conflicting: usize,
        ratio: BiasRatio,
        split: Split,
        rng: &mut Rng,
    ) -> BiasedDataset {
        let k = self.num_classes;
        let mut samples = Vec::with_capacity(k * n_per_class);
        for label in 0..k {
            for i in 0..n_per_class {
                let bias = if i < n_per_class - n_conflicting {
                    label
                } else {
                    conflicting_bias(label, k, rng.below(k - 1))
                };
                samples.push(self.sample(label, bias, rng));
            }
        }
        BiasedDataset {
            samples,
            num_classes: k,
            num_biases: k,
            input_dim: self.input_dim(),
            ratio,
            split,
        }
    }
}

/// Biased training split: `⌈ρ·n_per_class⌉` conflicting samples per class.
pub fn gen_two_signal(params: &TwoSignalParams, rng: &mut Rng) -> Result<BiasedDataset> {
    params.check_signal()?;
    if !(params.ratio > 0.0 && params.ratio < 0.5) {
        return Err(Error::config(format!(
            "bias ratio {} must lie in (0, 0.5)",
            params.ratio
        )));
    }
    let ratio = BiasRatio::from_f64(params.ratio)?;
    if u64::from(ratio.num) * (params.n_per_class as u64) < u64::from(ratio.den) {
        return Err(Error::config(format!(
            "no conflicting samples representable: ratio {} x {} per class < 1",
            params.ratio, params.n_per_class
        )));
    }
    let n_conf = ratio.conflicting_count(params.n_per_class);
    Ok(params.generate(params.n_per_class, n_conf, ratio, Split::Train, rng))
}

/// Unbiased evaluation split: per class, half aligned and half conflicting.
/// `params.ratio` and `params.n_per_class` are ignored.
pub fn gen_unbiased_test(
    params: &TwoSignalParams,
    n_per_class: usize,
    rng: &mut Rng,
) -> Result<BiasedDataset> {
    params.check_signal()?;
    if n_per_class == 0 || !n_per_class.is_multiple_of(2) {
        return Err(Error::config(format!(
            "unbiased split needs an even, positive per-class count, got {n_per_class}"
        )));
    }
    let ratio = BiasRatio::new(1, 2)?;
    Ok(params.generate(n_per_class, n_per_class / 2, ratio, Split::Test, rng))
}
