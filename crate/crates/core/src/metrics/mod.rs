//! Neural-Collapse measurements.
//!
//! * NC1 `(1/K)·Tr(Σ_W Σ_B⁺)`: within-class variability relative to the
//!   spread of class means.
//! * NC2 `‖WᵀW/‖WᵀW‖_F − T‖_F`: distance of the classifier Gram to the
//!   normalized simplex-ETF Gram `T = (I_K − 11ᵀ/K)/√(K−1)`.
//! * NC3 `‖WᵀZ̄/‖WᵀZ̄‖_F − T‖_F`: weight/class-mean duality.
//! * NC4: agreement between the linear decision and nearest-class-mean.
//!
//! Features are passed as an `n×d` matrix (one row per sample), classifier
//! weights as `d×K` (one column per class).

mod dump;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{argmax, argmin, dot, pinv_psd, Matrix};

pub use dump::{decode_features, encode_features, FeatureDump, FLAG_TEST_SPLIT};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    /// `d×K`, column `k` is the mean of class `k`.
    pub means: Matrix,
    pub global_mean: Vec<f64>,
    /// `d×K`, column `k` is `z̄_k − z_G`.
    pub centered: Matrix,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterMatrices {
    pub between: Matrix,
    pub within: Matrix,
}

/// Per-class and global means. Every class in `0..num_classes` must be present.
pub fn class_stats(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<ClassStats> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} features", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptyClass(0));
    }
    // Accumulate offsets from the first feature so identical inputs give
    // exactly identical means.
    let reference = features.row(0);
    let mut sums = Matrix::zeros(d, num_classes);
    let mut total = vec![0.0; d];
    let mut counts = vec![0usize; num_classes];
    for (i, &k) in labels.iter().enumerate() {
        if k >= num_classes {
            return Err(Error::Index { index: k, len: num_classes });
        }
        counts[k] += 1;
        for (j, (&x, &r)) in features.row(i).iter().zip(reference).enumerate() {
            sums[(j, k)] += x - r;
            total[j] += x - r;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(k));
    }
    let means = Matrix::from_fn(d, num_classes, |j, k| reference[j] + sums[(j, k)] / counts[k] as f64);
    let global_mean: Vec<f64> = (0..d).map(|j| reference[j] + total[j] / n as f64).collect();
    let centered = Matrix::from_fn(d, num_classes, |j, k| means[(j, k)] - global_mean[j]);
    Ok(ClassStats {
        means,
        global_mean,
        centered,
        counts,
    })
}

/// `Σ_B = (1/K) Σ_k (z̄_k − z_G)(z̄_k − z_G)ᵀ` and
/// `Σ_W = (1/K) Σ_k (1/n_k) Σ_i (z_ki − z̄_k)(z_ki − z̄_k)ᵀ`.
pub fn scatter(features: &Matrix, labels: &[usize], stats: &ClassStats) -> Result<ScatterMatrices> {
    let d = stats.global_mean.len();
    let k = stats.counts.len();
    if features.cols() != d || labels.len() != features.rows() {
        return Err(Error::shape("features do not match the class statistics"));
    }
    let kf = k as f64;
    let between = stats.centered.matmul_t(&stats.centered)?.scale(1.0 / kf);

    let mut within = Matrix::zeros(d, d);
    let mut diff = vec![0.0; d];
    for (i, &c) in labels.iter().enumerate() {
        for (j, v) in diff.iter_mut().enumerate() {
            *v = features[(i, j)] - stats.means[(j, c)];
        }
        let w = 1.0 / (kf * stats.counts[c] as f64);
        for a in 0..d {
            let da = diff[a] * w;
            if da == 0.0 {
                continue;
            }
            let row = within.row_mut(a);
            for (b, &db) in diff.iter().enumerate() {
                row[b] += da * db;
            }
        }
    }
    Ok(ScatterMatrices { between, within })
}

/// NC1. Returns `+∞` when `Σ_B` vanishes while `Σ_W` does not.
pub fn nc1(features: &Matrix, labels: &[usize], stats: &ClassStats) -> Result<f64> {
    let s = scatter(features, labels, stats)?;
    if s.between.max_abs() == 0.0 {
        return Ok(if s.within.max_abs() == 0.0 { 0.0 } else { f64::INFINITY });
    }
    let pinv = pinv_psd(&s.between)?;
    let k = stats.counts.len() as f64;
    Ok((s.within.matmul(&pinv)?.trace() / k).max(0.0))
}

/// `(I_K − 11ᵀ/K)/√(K−1)`; unit Frobenius norm.
pub fn normalized_etf_target(k: usize) -> Matrix {
    let kf = k as f64;
    let s = 1.0 / (kf - 1.0).sqrt();
    Matrix::from_fn(k, k, |i, j| s * (f64::from(u8::from(i == j)) - 1.0 / kf))
}

fn distance_to_target(product: &Matrix) -> Result<f64> {
    let k = product.rows();
    if k < 2 {
        return Err(Error::config("NC2/NC3 need at least two classes"));
    }
    let norm = product.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::config("NC2/NC3 undefined for a zero matrix product"));
    }
    Ok(product
        .scale(1.0 / norm)
        .sub(&normalized_etf_target(k))?
        .frobenius_norm())
}

/// NC2 on the `d×K` weight matrix, using the `K×K` Gram `WᵀW`.
pub fn nc2(w: &Matrix) -> Result<f64> {
    if w.max_abs() == 0.0 {
        return Err(Error::config("NC2 undefined for zero weights"));
    }
    distance_to_target(&w.t_matmul(w)?)
}

/// NC3 on `WᵀZ̄`.
pub fn nc3(w: &Matrix, stats: &ClassStats) -> Result<f64> {
    if w.shape() != stats.centered.shape() {
        return Err(Error::shape(format!(
            "weights {:?} vs centered means {:?}",
            w.shape(),
            stats.centered.shape()
        )));
    }
    distance_to_target(&w.t_matmul(&stats.centered)?)
}

/// Fraction of features where `argmax_k ⟨z, w_k⟩ + bias_k` equals
/// `argmin_k ‖z − z̄_k‖`. Ties go to the lower class index in both rules.
pub fn nc4_agreement(features: &Matrix, stats: &ClassStats, w: &Matrix, bias: &[f64]) -> Result<f64> {
    let (n, d) = features.shape();
    let k = stats.counts.len();
    if w.shape() != (d, k) || bias.len() != k {
        return Err(Error::shape("weights/bias do not match features and classes"));
    }
    if n == 0 {
        return Err(Error::shape("NC4 needs at least one feature"));
    }
    let scores = features.matmul(w)?;
    let means_t = stats.means.transpose();
    let mut agree = 0usize;
    let mut logits = vec![0.0; k];
    let mut dists = vec![0.0; k];
    for i in 0..n {
        let z = features.row(i);
        for c in 0..k {
            logits[c] = scores[(i, c)] + bias[c];
            let m = means_t.row(c);
            dists[c] = z.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        if argmax(&logits) == argmin(&dists) {
            agree += 1;
        }
    }
    Ok(agree as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Aligned,
    Conflicting,
}

/// One subset's metrics. `None` marks a metric that could not be computed;
/// the reason is recorded in `flags`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NcReport {
    pub subset: Subset,
    pub nc1: Option<f64>,
    pub nc2: Option<f64>,
    pub nc3: Option<f64>,
    pub nc4_agreement: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubsetReports {
    pub all: NcReport,
    pub aligned: NcReport,
    pub conflicting: NcReport,
}

/// NC metrics for a subset of features. `classifier` is `(W, bias)` with `W`
/// the `d×K` learnable-feature block; without it only NC1 is reported.
pub fn nc_report(
    subset: Subset,
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
    classifier: Option<(&Matrix, &[f64])>,
) -> NcReport {
    let mut report = NcReport {
        subset,
        nc1: None,
        nc2: None,
        nc3: None,
        nc4_agreement: None,
        flags: Vec::new(),
    };
    if let Some((w, _)) = classifier {
        match nc2(w) {
            Ok(v) => report.nc2 = Some(v),
            Err(e) => report.flags.push(format!("nc2: {e}")),
        }
    }
    let stats = match class_stats(features, labels, num_classes) {
        Ok(s) => s,
        Err(e) => {
            report.flags.push(format!("absent: {e}"));
            return report;
        }
    };
    match nc1(features, labels, &stats) {
        Ok(v) if v.is_finite() => report.nc1 = Some(v),
        Ok(_) => report
            .flags
            .push("nc1: infinite (between-class scatter is zero)".into()),
        Err(e) => report.flags.push(format!("nc1: {e}")),
    }
    if let Some((w, bias)) = classifier {
        match nc3(w, &stats) {
            Ok(v) => report.nc3 = Some(v),
            Err(e) => report.flags.push(format!("nc3: {e}")),
        }
        match nc4_agreement(features, &stats, w, bias) {
            Ok(v) => report.nc4_agreement = Some(v),
            Err(e) => report.flags.push(format!("nc4: {e}")),
        }
    }
    report
}

/// Reports for all features and for the aligned / conflicting subsets, each
/// using its own class statistics.
pub fn subset_report(
    features: &Matrix,
    labels: &[usize],
    aligned: &[bool],
    num_classes: usize,
    classifier: Option<(&Matrix, &[f64])>,
) -> Result<SubsetReports> {
    if aligned.len() != features.rows() || labels.len() != features.rows() {
        return Err(Error::shape("feature, label and flag counts differ"));
    }
    let pick = |want: bool| {
        let idx: Vec<usize> = (0..features.rows()).filter(|&i| aligned[i] == want).collect();
        let d = features.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            data.extend_from_slice(features.row(i));
        }
        let m = Matrix::from_vec(idx.len(), d, data).expect("consistent");
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        (m, l)
    };
    let (fa, la) = pick(true);
    let (fc, lc) = pick(false);
    Ok(SubsetReports {
        all: nc_report(Subset::All, features, labels, num_classes, classifier),
        aligned: nc_report(Subset::Aligned, &fa, &la, num_classes, classifier),
        conflicting: nc_report(Subset::Conflicting, &fc, &lc, num_classes, classifier),
    })
}

/// Cosine similarity of two vectors; 0 when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}
