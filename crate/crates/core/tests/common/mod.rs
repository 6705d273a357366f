#![allow(dead_code)]

use etf_debias::data::{gen_two_signal, BiasedDataset, TwoSignalParams};
use etf_debias::etf::EtfFrame;
use etf_debias::model::{Architecture, Model};
use etf_debias::numerics::{streams, Rng};
use etf_debias::train::objective_mean;

/// `[20→16→16→8]` primed net with `K = B = 4` and a matching dataset.
pub struct SmallProblem {
    pub model: Model,
    pub frame: EtfFrame,
    pub data: BiasedDataset,
    pub indices: Vec<usize>,
}

pub fn small_problem(seed: u64, batch: usize) -> SmallProblem {
    let params = TwoSignalParams {
        num_classes: 4,
        n_per_class: 40,
        ratio: 0.25,
        noise_dim: 12,
        ..Default::default()
    };
    let data = gen_two_signal(&params, &mut Rng::new(seed, streams::TRAIN_DATA)).unwrap();
    assert_eq!(data.input_dim, 20);
    let arch = Architecture::mlp3(20, 16, 8, 4, true);
    let mut model = Model::init(&arch, &mut Rng::new(seed, streams::INIT)).unwrap();
    let mut rng = Rng::new(seed, streams::ANALYSIS);
    // Nonzero biases so their gradients are exercised too.
    for (slice, _) in model.param_slices_mut() {
        if slice.iter().all(|&v| v == 0.0) {
            slice.iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    }
    let frame = EtfFrame::build(8, 4, &mut Rng::new(seed, streams::FRAME)).unwrap();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut indices);
    indices.truncate(batch);
    SmallProblem {
        model,
        frame,
        data,
        indices,
    }
}

/// Analytic and central-difference gradients, flattened in parameter order.
pub fn finite_differences(p: &SmallProblem, alpha: f64, h: f64) -> Vec<(f64, f64)> {
    let f = |m: &Model| objective_mean(m, Some(&p.frame), &p.data, &p.indices, alpha).unwrap();
    let (_, grads) = f(&p.model);
    let analytic: Vec<f64> = grads.slices().into_iter().flat_map(|s| s.to_vec()).collect();
    let mut model = p.model.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let sizes: Vec<usize> = model.param_slices_mut().into_iter().map(|(s, _)| s.len()).collect();
    for (si, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = model.param_slices_mut()[si].0[j];
            model.param_slices_mut()[si].0[j] = orig + h;
            let up = f(&model).0;
            model.param_slices_mut()[si].0[j] = orig - h;
            let down = f(&model).0;
            model.param_slices_mut()[si].0[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    analytic.into_iter().zip(numeric).collect()
}

/// Largest `|a − n|` relative to the gradient scale of the parameter tensor
/// the entry belongs to. Entries whose gradient is orders of magnitude below
/// the tensor's scale sit under the finite-difference roundoff floor, so a
/// purely elementwise ratio would measure noise, not the backward pass.
pub fn max_relative_error(model: &Model, pairs: &[(f64, f64)]) -> f64 {
    let mut off = 0;
    let mut worst: f64 = 0.0;
    for len in model.param_slices().iter().map(|s| s.len()) {
        let chunk = &pairs[off..off + len];
        off += len;
        let scale = chunk.iter().fold(0.0f64, |m, &(a, n)| m.max(a.abs()).max(n.abs()));
        if scale == 0.0 {
            continue;
        }
        for &(a, n) in chunk {
            worst = worst.max((a - n).abs() / scale);
        }
    }
    assert_eq!(off, pairs.len());
    worst
}

/// Plain elementwise `|a − n| / max(|a|, |n|)`, for reporting.
pub fn max_elementwise_relative_error(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .filter(|(a, n)| a.abs().max(n.abs()) > 0.0)
        .map(|&(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}
