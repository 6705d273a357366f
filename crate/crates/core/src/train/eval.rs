use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::BiasedDataset;
use crate::error::{Error, Result};
use crate::etf::EtfFrame;
use crate::model::Model;
use crate::numerics::{argmax, Matrix};

const EVAL_CHUNK: usize = 1024;

/// Which prime the classifier sees at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimePolicy {
    /// All-zero prime for every sample; the unbiased decision rule.
    Null,
    /// The sample's own bias prime. Diagnostic only.
    OracleBias,
}

impl FromStr for PrimePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null" => Ok(Self::Null),
            "oracle-bias" => Ok(Self::OracleBias),
            other => Err(Error::config(format!("unknown prime policy {other:?}"))),
        }
    }
}

/// Accuracies; a subset with no samples reports `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    pub aligned: Option<f64>,
    pub conflicting: Option<f64>,
    pub per_class: Vec<Option<f64>>,
    pub samples: usize,
}

fn ratio(hit: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hit as f64 / total as f64)
}

fn check_dims(model: &Model, ds: &BiasedDataset) -> Result<()> {
    let arch = model.architecture();
    if arch.input_dim() != ds.input_dim || arch.num_classes != ds.num_classes {
        return Err(Error::shape(format!(
            "model expects d_in={} K={}, dataset has d_in={} K={}",
            arch.input_dim(),
            arch.num_classes,
            ds.input_dim,
            ds.num_classes
        )));
    }
    Ok(())
}

/// Stacks `m_{b_i}` for the given bias attributes.
pub(crate) fn prime_rows(frame: &EtfFrame, biases: impl ExactSizeIterator<Item = usize>) -> Result<Matrix> {
    let m = frame.primes();
    let n = biases.len();
    let mut out = Matrix::zeros(n, m.rows());
    for (i, b) in biases.enumerate() {
        if b >= m.cols() {
            return Err(Error::Index { index: b, len: m.cols() });
        }
        for j in 0..m.rows() {
            out[(i, j)] = m[(j, b)];
        }
    }
    Ok(out)
}

/// Logits for `indices` under the given policy.
pub(crate) fn logits_for(
    model: &Model,
    frame: Option<&EtfFrame>,
    ds: &BiasedDataset,
    indices: &[usize],
    policy: PrimePolicy,
) -> Result<Matrix> {
    let x = ds.inputs(indices);
    let primes = match (model.has_primes(), policy) {
        (false, _) => None,
        (true, PrimePolicy::Null) => Some(Matrix::zeros(indices.len(), model.classifier.prime_dim())),
        (true, PrimePolicy::OracleBias) => {
            let frame = frame.ok_or_else(|| Error::config("oracle-bias policy needs the prime frame"))?;
            Some(prime_rows(frame, indices.iter().map(|&i| ds.samples[i].bias))?)
        }
    };
    let z = model.backbone.features(&x)?;
    Ok(model.classifier.forward(&z, primes.as_ref())?.logits)
}

/// Argmax-of-logits accuracy, split by aligned/conflicting and by class.
pub fn evaluate(
    model: &Model,
    frame: Option<&EtfFrame>,
    ds: &BiasedDataset,
    policy: PrimePolicy,
) -> Result<AccuracyReport> {
    check_dims(model, ds)?;
    let k = ds.num_classes;
    let mut hit = [0usize; 2];
    let mut total = [0usize; 2];
    let mut class_hit = vec![0usize; k];
    let mut class_total = vec![0usize; k];
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let logits = logits_for(model, frame, ds, chunk, policy)?;
        for (r, &i) in chunk.iter().enumerate() {
            let s = &ds.samples[i];
            let ok = argmax(logits.row(r)) == s.label;
            let slot = usize::from(!s.aligned);
            total[slot] += 1;
            class_total[s.label] += 1;
            if ok {
                hit[slot] += 1;
                class_hit[s.label] += 1;
            }
        }
    }
    Ok(AccuracyReport {
        overall: ratio(hit[0] + hit[1], total[0] + total[1]).unwrap_or(0.0),
        aligned: ratio(hit[0], total[0]),
        conflicting: ratio(hit[1], total[1]),
        per_class: (0..k).map(|c| ratio(class_hit[c], class_total[c])).collect(),
        samples: ds.len(),
    })
}

/// Learnable features `z` for every sample, one row each.
pub fn extract_features(model: &Model, ds: &BiasedDataset) -> Result<Matrix> {
    check_dims(model, ds)?;
    let d = model.backbone.feature_dim();
    let mut data = Vec::with_capacity(ds.len() * d);
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        data.extend_from_slice(model.backbone.features(&ds.inputs(chunk))?.data());
    }
    Matrix::from_vec(ds.len(), d, data)
}

/// One row of the training log. Missing values (no test set, subset
/// without samples, metric not computed) are `None` and written as empty
/// CSV fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_ce: f64,
    pub loss_re: f64,
    pub acc_train_aligned: Option<f64>,
    pub acc_train_conflicting: Option<f64>,
    pub acc_test_unbiased: Option<f64>,
    pub acc_test_aligned: Option<f64>,
    pub acc_test_conflicting: Option<f64>,
    pub nc1: Option<f64>,
    pub nc2: Option<f64>,
    pub nc3: Option<f64>,
    pub nc4_agreement: Option<f64>,
    pub nc1_aligned: Option<f64>,
    pub nc1_conflicting: Option<f64>,
}

pub fn write_log_csv<W: Write>(logs: &[EpochLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in logs {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv<R: std::io::Read>(input: R) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_unbiased_test, TwoSignalParams};
    use crate::model::Architecture;
    use crate::numerics::Rng;

    #[test]
    fn untrained_model_is_near_chance() {
        let p = TwoSignalParams::default();
        let test = gen_unbiased_test(&p, 200, &mut Rng::new(1, 2)).unwrap();
        let arch = Architecture::mlp3(p.input_dim(), 100, 100, 10, true);
        let mut accs = Vec::new();
        for seed in 0..5 {
            let model = Model::init(&arch, &mut Rng::new(seed, 3)).unwrap();
            accs.push(evaluate(&model, None, &test, PrimePolicy::Null).unwrap().overall);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.1).abs() <= 0.03, "{accs:?}");
    }

    #[test]
    fn subset_accuracies_average_to_overall() {
        let p = TwoSignalParams {
            num_classes: 4,
            ..Default::default()
        };
        let test = gen_unbiased_test(&p, 50, &mut Rng::new(1, 2)).unwrap();
        let arch = Architecture::mlp3(p.input_dim(), 16, 8, 4, false);
        let model = Model::init(&arch, &mut Rng::new(2, 3)).unwrap();
        let r = evaluate(&model, None, &test, PrimePolicy::Null).unwrap();
        let avg = (r.aligned.unwrap() + r.conflicting.unwrap()) / 2.0;
        assert!((avg - r.overall).abs() < 1e-12);
        assert_eq!(r.samples, 200);
    }

    #[test]
    fn oracle_policy_needs_frame() {
        let p = TwoSignalParams {
            num_classes: 3,
            ..Default::default()
        };
        let test = gen_unbiased_test(&p, 10, &mut Rng::new(1, 2)).unwrap();
        let arch = Architecture::mlp3(p.input_dim(), 8, 4, 3, true);
        let model = Model::init(&arch, &mut Rng::new(2, 3)).unwrap();
        assert!(matches!(
            evaluate(&model, None, &test, PrimePolicy::OracleBias),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_round_trip_with_blanks() {
        let row = EpochLog {
            epoch: 3,
            loss_ce: 0.5,
            loss_re: 0.25,
            acc_train_aligned: Some(0.9),
            acc_train_conflicting: Some(0.1),
            acc_test_unbiased: None,
            acc_test_aligned: None,
            acc_test_conflicting: None,
            nc1: Some(1.5),
            nc2: Some(0.2),
            nc3: Some(0.3),
            nc4_agreement: Some(0.99),
            nc1_aligned: None,
            nc1_conflicting: Some(4.0),
        };
        let mut buf = Vec::new();
        write_log_csv(std::slice::from_ref(&row), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("epoch,loss_ce,loss_re,acc_train_aligned,"));
        assert!(text.contains(",,,"));
        assert_eq!(read_log_csv(buf.as_slice()).unwrap(), vec![row]);
    }
}
