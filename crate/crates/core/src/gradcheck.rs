//! Pulling/forcing analysis of the cross-entropy gradient of a bias-free
//! linear classifier over `z̃ = [z; m]` with weights `W̃ = [W; A]`.
//!
//! For a sample of class `k`:
//!
//! ```text
//! ∂L/∂w̃_k  = −(1 − p_k) z̃            (pulling, same class)
//! ∂L/∂w̃_k' =  p_k' z̃,  k' ≠ k        (forcing, other classes)
//! ∂L/∂z̃    = −(1 − p_k) w̃_k + Σ_{k'≠k} p_k' w̃_k'
//! ```
//!
//! with `p_k = exp(zᵀw_k + mᵀa_k)/Z`, `p_k^(l) = exp(zᵀw_k)/Z` and
//! `p_k^(b) = exp(mᵀa_k)/Z` sharing one normalizer `Z`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::etf::EtfFrame;
use crate::metrics::cosine;
use crate::model::Model;
use crate::numerics::{log_sum_exp, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct Probs {
    pub p: Vec<f64>,
    pub p_l: Vec<f64>,
    pub p_b: Vec<f64>,
}

/// `w` is `d×K`, `a` is `p×K` (`p = 0` for a vanilla classifier, with `m`
/// empty).
pub fn probs(z: &[f64], m: &[f64], w: &Matrix, a: &Matrix) -> Probs {
    let k = w.cols();
    let learn: Vec<f64> = (0..k).map(|c| col_dot(w, c, z)).collect();
    let prime: Vec<f64> = (0..k).map(|c| col_dot(a, c, m)).collect();
    let joint: Vec<f64> = learn.iter().zip(&prime).map(|(l, b)| l + b).collect();
    let log_z = log_sum_exp(&joint);
    let norm = |v: &[f64]| v.iter().map(|x| (x - log_z).exp()).collect::<Vec<_>>();
    Probs {
        p: norm(&joint),
        p_l: norm(&learn),
        p_b: norm(&prime),
    }
}

fn col_dot(w: &Matrix, c: usize, v: &[f64]) -> f64 {
    (0..w.rows()).map(|r| w[(r, c)] * v[r]).sum()
}

/// Per-sample weight factors of the class-`k` pulling term.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleFactors {
    pub label: usize,
    pub aligned: bool,
    /// `1 − p_k`, exact.
    pub pull: f64,
    /// `1 − p_k^(b) − p_k^(l)`.
    pub relaxed_pull: f64,
    /// `p_k^(b) + p_k^(l)`.
    pub relaxed_force: f64,
}

/// Classifier-weight gradient of the summed CE over a batch, split by part.
/// All matrices are `(d + p) × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightDecomposition {
    pub pulling: Matrix,
    pub forcing: Matrix,
    pub exact: Matrix,
    pub factors: Vec<SampleFactors>,
}

/// Feature gradient of one sample, split by part. Vectors have length `d + p`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDecomposition {
    pub pulling: Vec<f64>,
    pub forcing: Vec<f64>,
    pub exact: Vec<f64>,
}

/// Inputs of the analysis: `z̃` rows and labels.
#[derive(Clone, Debug)]
pub struct AnalysisBatch {
    /// `n × d` learnable features.
    pub z: Matrix,
    /// `n × p` primes; `p = 0` for vanilla.
    pub m: Matrix,
    pub labels: Vec<usize>,
    pub aligned: Vec<bool>,
}

impl AnalysisBatch {
    fn joint(&self, i: usize) -> Vec<f64> {
        let mut v = self.z.row(i).to_vec();
        v.extend_from_slice(self.m.row(i));
        v
    }

    fn check(&self, w_tilde: &Matrix) -> Result<()> {
        let n = self.z.rows();
        if self.m.rows() != n || self.labels.len() != n || self.aligned.len() != n {
            return Err(Error::shape("analysis batch fields disagree on length"));
        }
        if w_tilde.rows() != self.z.cols() + self.m.cols() {
            return Err(Error::shape(format!(
                "classifier has {} input rows, batch has d={} p={}",
                w_tilde.rows(),
                self.z.cols(),
                self.m.cols()
            )));
        }
        if let Some(&k) = self.labels.iter().find(|&&k| k >= w_tilde.cols()) {
            return Err(Error::Index { index: k, len: w_tilde.cols() });
        }
        Ok(())
    }
}

fn split_blocks(w_tilde: &Matrix, d: usize) -> (Matrix, Matrix) {
    (w_tilde.row_range(0, d), w_tilde.row_range(d, w_tilde.rows()))
}

pub fn grad_w_decomposition(batch: &AnalysisBatch, w_tilde: &Matrix) -> Result<WeightDecomposition> {
    batch.check(w_tilde)?;
    let (rows, k) = w_tilde.shape();
    let (w, a) = split_blocks(w_tilde, batch.z.cols());
    let mut pulling = Matrix::zeros(rows, k);
    let mut forcing = Matrix::zeros(rows, k);
    let mut residual_matrix = Matrix::zeros(batch.z.rows(), k);
    let mut factors = Vec::with_capacity(batch.z.rows());
    for i in 0..batch.z.rows() {
        let label = batch.labels[i];
        let pr = probs(batch.z.row(i), batch.m.row(i), &w, &a);
        let zt = batch.joint(i);
        for c in 0..k {
            residual_matrix[(i, c)] = pr.p[c] - f64::from(u8::from(c == label));
            let (target, coef) = if c == label {
                (&mut pulling, -(1.0 - pr.p[c]))
            } else {
                (&mut forcing, pr.p[c])
            };
            for (r, &x) in zt.iter().enumerate() {
                target[(r, c)] += coef * x;
            }
        }
        factors.push(SampleFactors {
            label,
            aligned: batch.aligned[i],
            pull: 1.0 - pr.p[label],
            relaxed_pull: 1.0 - pr.p_b[label] - pr.p_l[label],
            relaxed_force: pr.p_b[label] + pr.p_l[label],
        });
    }
    // Matrix form Z̃ᵀ(P − Y), computed independently of the split.
    let joint = Matrix::from_fn(batch.z.rows(), rows, |i, r| {
        if r < batch.z.cols() {
            batch.z[(i, r)]
        } else {
            batch.m[(i, r - batch.z.cols())]
        }
    });
    let exact = joint.t_matmul(&residual_matrix)?;
    Ok(WeightDecomposition {
        pulling,
        forcing,
        exact,
        factors,
    })
}

pub fn grad_z_decomposition(
    z: &[f64],
    m: &[f64],
    label: usize,
    w_tilde: &Matrix,
) -> Result<FeatureDecomposition> {
    let k = w_tilde.cols();
    if z.len() + m.len() != w_tilde.rows() || label >= k {
        return Err(Error::shape("feature/prime/label do not fit the classifier"));
    }
    let (w, a) = split_blocks(w_tilde, z.len());
    let pr = probs(z, m, &w, &a);
    let rows = w_tilde.rows();
    let mut pulling = vec![0.0; rows];
    let mut forcing = vec![0.0; rows];
    let mut exact = vec![0.0; rows];
    for r in 0..rows {
        pulling[r] = -(1.0 - pr.p[label]) * w_tilde[(r, label)];
        forcing[r] = (0..k)
            .filter(|&c| c != label)
            .map(|c| pr.p[c] * w_tilde[(r, c)])
            .sum();
        // W̃ (p − e_k)
        exact[r] = (0..k)
            .map(|c| w_tilde[(r, c)] * (pr.p[c] - f64::from(u8::from(c == label))))
            .sum();
    }
    Ok(FeatureDecomposition {
        pulling,
        forcing,
        exact,
    })
}

/// Vanilla classifier (`W` only): the same decomposition with `m` empty.
pub fn vanilla_grad_decomposition(
    z: &Matrix,
    labels: &[usize],
    aligned: &[bool],
    w: &Matrix,
) -> Result<(WeightDecomposition, Vec<FeatureDecomposition>)> {
    let batch = AnalysisBatch {
        z: z.clone(),
        m: Matrix::zeros(z.rows(), 0),
        labels: labels.to_vec(),
        aligned: aligned.to_vec(),
    };
    let wd = grad_w_decomposition(&batch, w)?;
    let fd = (0..z.rows())
        .map(|i| grad_z_decomposition(z.row(i), &[], labels[i], w))
        .collect::<Result<Vec<_>>>()?;
    Ok((wd, fd))
}

/// Summed pulling factors `Σ (1 − p_k)` of class `class`, as
/// `(aligned, conflicting)`.
pub fn pulling_mass(factors: &[SampleFactors], class: usize) -> (f64, f64) {
    factors
        .iter()
        .filter(|f| f.label == class)
        .fold((0.0, 0.0), |(a, c), f| {
            if f.aligned {
                (a + f.pull, c)
            } else {
                (a, c + f.pull)
            }
        })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Residuals of the decomposition on a real model, with the classifier bias
/// zeroed. `batch` must hold features produced by `model` and the training
/// primes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecompositionReport {
    pub samples: usize,
    /// `max |Σ p − 1|`.
    pub prob_sum: f64,
    /// `max |p − softmax(W̃ᵀz̃)|`, forward logits recomputed by the model.
    pub prob_vs_forward: f64,
    /// `max |pulling + forcing − exact|` for the weight gradient.
    pub weight_identity: f64,
    /// `max |exact − backward|` for the weight gradient.
    pub weight_vs_backward: f64,
    pub feature_identity: f64,
    /// Learnable block of the feature gradient against backward.
    pub feature_vs_backward: f64,
}

impl DecompositionReport {
    pub fn max_residual(&self) -> f64 {
        [
            self.prob_sum,
            self.prob_vs_forward,
            self.weight_identity,
            self.weight_vs_backward,
            self.feature_identity,
            self.feature_vs_backward,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

pub fn check_model(model: &Model, x: &Matrix, batch_primes: &Matrix, labels: &[usize], aligned: &[bool]) -> Result<DecompositionReport> {
    let mut model = model.clone();
    model.classifier.bias.iter_mut().for_each(|b| *b = 0.0);
    let primes = model.has_primes().then_some(batch_primes);
    let trace = model.forward(x, primes)?;
    let n = x.rows();
    let k = model.classifier.num_classes();
    let batch = AnalysisBatch {
        z: trace.features().clone(),
        m: if model.has_primes() {
            batch_primes.clone()
        } else {
            Matrix::zeros(n, 0)
        },
        labels: labels.to_vec(),
        aligned: aligned.to_vec(),
    };
    let w_tilde = &model.classifier.weight;
    let wd = grad_w_decomposition(&batch, w_tilde)?;
    let (w, a) = split_blocks(w_tilde, batch.z.cols());

    let mut d_logits = Matrix::zeros(n, k);
    let mut prob_sum: f64 = 0.0;
    let mut prob_vs_forward: f64 = 0.0;
    let mut feature_identity: f64 = 0.0;
    let mut feature_exact = Vec::with_capacity(n);
    for i in 0..n {
        let pr = probs(batch.z.row(i), batch.m.row(i), &w, &a);
        prob_sum = prob_sum.max((pr.p.iter().sum::<f64>() - 1.0).abs());
        prob_vs_forward = prob_vs_forward.max(max_abs_diff(&pr.p, &crate::numerics::softmax(trace.logits().row(i))));
        for c in 0..k {
            d_logits[(i, c)] = pr.p[c] - f64::from(u8::from(c == labels[i]));
        }
        let fd = grad_z_decomposition(batch.z.row(i), batch.m.row(i), labels[i], w_tilde)?;
        let sum: Vec<f64> = fd.pulling.iter().zip(&fd.forcing).map(|(a, b)| a + b).collect();
        feature_identity = feature_identity.max(max_abs_diff(&sum, &fd.exact));
        feature_exact.push(fd.exact);
    }
    let (grads, dz) = model.backward(&trace, &d_logits)?;
    let split_sum = wd.pulling.add(&wd.forcing)?;
    let feature_vs_backward = (0..n)
        .map(|i| max_abs_diff(&feature_exact[i][..batch.z.cols()], dz.row(i)))
        .fold(0.0, f64::max);
    Ok(DecompositionReport {
        samples: n,
        prob_sum,
        prob_vs_forward,
        weight_identity: max_abs_diff(split_sum.data(), wd.exact.data()),
        weight_vs_backward: max_abs_diff(wd.exact.data(), grads.classifier_weight.data()),
        feature_identity,
        feature_vs_backward,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassOrdering {
    pub class: usize,
    pub aligned_p_b: f64,
    pub max_conflicting_p_b: f64,
    pub aligned_pull: f64,
    pub min_conflicting_pull: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderingReport {
    pub num_classes: usize,
    pub classes: Vec<ClassOrdering>,
    pub holds: bool,
}

/// Re-weighting premise: `z = 0`, `A = M` (each `a_k` collapsed onto the prime
/// of its correlated attribute), arbitrary `W`. Checks that the aligned prime
/// gives a strictly larger `p_k^(b)`, hence a strictly smaller pulling factor,
/// than every conflicting prime.
pub fn ordering_check(frame: &EtfFrame) -> OrderingReport {
    let m = frame.primes();
    let k = frame.num_vertices();
    let d = frame.dim();
    let w = Matrix::zeros(d, k);
    let z = vec![0.0; d];
    let per_prime: Vec<Probs> = (0..k).map(|b| probs(&z, &m.column(b), &w, m)).collect();
    let classes: Vec<ClassOrdering> = (0..k)
        .map(|c| {
            let aligned = &per_prime[c];
            let others = (0..k).filter(|&b| b != c);
            let max_conf = others.clone().map(|b| per_prime[b].p_b[c]).fold(f64::NEG_INFINITY, f64::max);
            let min_pull = others.map(|b| 1.0 - per_prime[b].p[c]).fold(f64::INFINITY, f64::min);
            let aligned_pull = 1.0 - aligned.p[c];
            ClassOrdering {
                class: c,
                aligned_p_b: aligned.p_b[c],
                max_conflicting_p_b: max_conf,
                aligned_pull,
                min_conflicting_pull: min_pull,
                holds: aligned.p_b[c] > max_conf && aligned_pull < min_pull,
            }
        })
        .collect();
    OrderingReport {
        num_classes: k,
        holds: classes.iter().all(|c| c.holds),
        classes,
    }
}

/// `cos(a_k, m_k)` per class for a primed classifier.
pub fn a_alignment(model: &Model, frame: &EtfFrame) -> Result<Vec<f64>> {
    if !model.has_primes() {
        return Err(Error::config("model has no prime block"));
    }
    let a = model.classifier.a_block();
    let m = frame.primes();
    if a.rows() != m.rows() {
        return Err(Error::shape("prime block and frame dimensions differ"));
    }
    let k = a.cols().min(m.cols());
    Ok((0..k).map(|c| cosine(&a.column(c), &m.column(c))).collect())
}
