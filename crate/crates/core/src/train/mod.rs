//! Objectives, optimizer, and the epoch loop.
//!
//! For a sample `(x, k, b)` with prime `m_b` the debiasing objective is
//!
//! ```text
//! L = CE(F(z, m_b), k) + α · CE(F(z, m_b) − F(z, 0), b)
//! ```
//!
//! where `F` returns logits. Evaluation always feeds the all-zero prime.

mod eval;
mod optim;

use std::thread;

use serde::{Deserialize, Serialize};

pub use eval::{
    evaluate, extract_features, read_log_csv, write_log_csv, AccuracyReport, EpochLog, PrimePolicy,
};
pub use optim::{Optimizer, OptimizerKind};

use crate::data::{BiasedDataset, Split};
use crate::error::{Error, Result};
use crate::etf::{EtfFrame, PrimeKind};
use crate::metrics::subset_report;
use crate::model::{Architecture, Checkpoint, CheckpointMeta, Gradients, Mode, Model};
use crate::numerics::{log_sum_exp, softmax, streams, Matrix, Rng};

/// Samples per gradient work unit. Work units are reduced in index order, so
/// results do not depend on the thread count.
const WORK_UNIT: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Log every this many epochs; the final epoch is always logged.
    pub eval_every: usize,
    /// NC metrics on logged epochs that are multiples of this, and on the
    /// final epoch. 0 disables them except at the end.
    pub nc_every: usize,
    /// NC metrics on test features instead of training features.
    pub nc_on_test: bool,
    pub hidden: usize,
    pub feature_dim: usize,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::EtfDebias,
            alpha: 0.8,
            epochs: 200,
            batch: 256,
            lr: 1e-3,
            weight_decay: 1e-5,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            eval_every: 1,
            nc_every: 1,
            nc_on_test: false,
            hidden: 100,
            feature_dim: 100,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be >= 0"));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("eval_every", self.eval_every),
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("threads", self.threads),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// α actually applied; vanilla has no prime path.
    pub fn effective_alpha(&self) -> f64 {
        if self.mode.uses_primes() {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        Architecture::mlp3(
            input_dim,
            self.hidden,
            self.feature_dim,
            num_classes,
            self.mode.uses_primes(),
        )
    }
}

/// `−log softmax(logits)_k` and its gradient `softmax(logits) − e_k`.
pub fn loss_ce(logits: &[f64], k: usize) -> (f64, Vec<f64>) {
    let value = log_sum_exp(logits) - logits[k];
    let mut d = softmax(logits);
    d[k] -= 1.0;
    // Rounding can leave a tiny negative value; NaN must pass through.
    (if value < 0.0 { 0.0 } else { value }, d)
}

/// Cross-entropy of the logit difference `Δ = primed − null` against `b`.
/// Returns `(value, d_primed, d_null)` with `d_null = −d_primed`.
pub fn loss_re(primed: &[f64], null: &[f64], b: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let delta: Vec<f64> = primed.iter().zip(null).map(|(p, n)| p - n).collect();
    let (value, d_primed) = loss_ce(&delta, b);
    let d_null = d_primed.iter().map(|g| -g).collect();
    (value, d_primed, d_null)
}

/// Sums of the two loss terms and the gradient of their weighted sum over a
/// set of samples (not averaged).
#[derive(Clone, Debug)]
pub struct ObjectiveSums {
    pub ce: f64,
    pub re: f64,
    pub grads: Gradients,
}

/// Loss sums and summed gradients of `CE + α·RE` over `indices`.
///
/// `frame` must be given iff the model has a prime block. Both branches share
/// the backbone pass; their feature gradients are added before a single
/// backbone backward.
pub fn objective(
    model: &Model,
    frame: Option<&EtfFrame>,
    ds: &BiasedDataset,
    indices: &[usize],
    alpha: f64,
) -> Result<ObjectiveSums> {
    let x = ds.inputs(indices);
    let backbone = model.backbone.forward(&x)?;
    let z = backbone.features();
    let n = indices.len();
    let k = model.classifier.num_classes();

    let (primed, null) = match (model.has_primes(), frame) {
        (false, None) => (model.classifier.forward(z, None)?, None),
        (true, Some(frame)) => {
            let m = eval::prime_rows(frame, indices.iter().map(|&i| ds.samples[i].bias))?;
            let zero = Matrix::zeros(n, m.cols());
            (
                model.classifier.forward(z, Some(&m))?,
                Some(model.classifier.forward(z, Some(&zero))?),
            )
        }
        (true, None) => return Err(Error::config("primed model trained without a frame")),
        (false, Some(_)) => return Err(Error::config("frame supplied to a model without a prime block")),
    };

    let mut d_primed = Matrix::zeros(n, k);
    let mut d_null = Matrix::zeros(n, k);
    let (mut ce, mut re) = (0.0, 0.0);
    for (r, &i) in indices.iter().enumerate() {
        let s = &ds.samples[i];
        let (v, g) = loss_ce(primed.logits.row(r), s.label);
        ce += v;
        d_primed.row_mut(r).copy_from_slice(&g);
        if let Some(null) = &null {
            if s.bias >= k {
                // Only reachable with B > K, which is legal only for α = 0.
                if alpha > 0.0 {
                    return Err(Error::config("prime reinforcement requires B = K"));
                }
                continue;
            }
            let (v, gp, gn) = loss_re(primed.logits.row(r), null.logits.row(r), s.bias);
            re += v;
            for c in 0..k {
                d_primed[(r, c)] += alpha * gp[c];
                d_null[(r, c)] = alpha * gn[c];
            }
        }
    }

    let (mut cw, mut cb, mut dz) = model.classifier.backward(&primed, &d_primed)?;
    if let Some(null) = &null {
        let (nw, nb, ndz) = model.classifier.backward(null, &d_null)?;
        cw.add_assign(&nw);
        cb.iter_mut().zip(nb).for_each(|(a, b)| *a += b);
        dz.add_assign(&ndz);
    }
    let layers = model.backbone.backward(&backbone, &dz)?;
    Ok(ObjectiveSums {
        ce,
        re,
        grads: Gradients {
            layers,
            classifier_weight: cw,
            classifier_bias: cb,
        },
    })
}

/// Mean objective value `CE + α·RE` over `indices` and its gradient.
pub fn objective_mean(
    model: &Model,
    frame: Option<&EtfFrame>,
    ds: &BiasedDataset,
    indices: &[usize],
    alpha: f64,
) -> Result<(f64, Gradients)> {
    let mut s = objective(model, frame, ds, indices, alpha)?;
    let n = indices.len() as f64;
    s.grads.scale(1.0 / n);
    Ok(((s.ce + alpha * s.re) / n, s.grads))
}

fn batch_objective(
    model: &Model,
    frame: Option<&EtfFrame>,
    ds: &BiasedDataset,
    batch: &[usize],
    alpha: f64,
    threads: usize,
) -> Result<ObjectiveSums> {
    let units: Vec<&[usize]> = batch.chunks(WORK_UNIT).collect();
    let parts: Vec<Result<ObjectiveSums>> = if threads <= 1 || units.len() <= 1 {
        units.iter().map(|u| objective(model, frame, ds, u, alpha)).collect()
    } else {
        let per = units.len().div_ceil(threads);
        thread::scope(|scope| {
            let handles: Vec<_> = units
                .chunks(per)
                .map(|group| {
                    scope.spawn(move || {
                        group
                            .iter()
                            .map(|u| objective(model, frame, ds, u, alpha))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("gradient worker panicked"))
                .collect()
        })
    };
    let mut iter = parts.into_iter();
    let mut total = iter.next().expect("nonempty batch")?;
    for p in iter {
        let p = p?;
        total.ce += p.ce;
        total.re += p.re;
        total.grads.add_assign(&p.grads);
    }
    Ok(total)
}

/// Training state for one run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    train: &'a BiasedDataset,
    test: Option<&'a BiasedDataset>,
    model: Model,
    frame: Option<EtfFrame>,
    optimizer: Optimizer,
    shuffle: Rng,
    order: Vec<usize>,
}

impl<'a> Trainer<'a> {
    /// Fresh model from the init stream and frame from the frame stream.
    pub fn new(train: &'a BiasedDataset, test: Option<&'a BiasedDataset>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = cfg.architecture(train.input_dim, train.num_classes);
        let model = Model::init(&arch, &mut Rng::new(cfg.seed, streams::INIT))?;
        let mut frame_rng = Rng::new(cfg.seed, streams::FRAME);
        let frame = match cfg.mode {
            Mode::Vanilla => None,
            Mode::EtfDebias => Some(EtfFrame::build(cfg.feature_dim, train.num_biases, &mut frame_rng)?),
            Mode::RandomPrime => Some(EtfFrame::random_primes(
                cfg.feature_dim,
                train.num_biases,
                &mut frame_rng,
            )?),
        };
        Self::from_parts(train, test, cfg, model, frame)
    }

    /// Starts from an explicit model and frame.
    pub fn from_parts(
        train: &'a BiasedDataset,
        test: Option<&'a BiasedDataset>,
        cfg: &TrainConfig,
        model: Model,
        frame: Option<EtfFrame>,
    ) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        if cfg.mode.uses_primes() && cfg.alpha > 0.0 && train.num_biases != train.num_classes {
            return Err(Error::config(format!(
                "prime reinforcement requires B = K (got B={}, K={})",
                train.num_biases, train.num_classes
            )));
        }
        let arch = model.architecture();
        if arch.input_dim() != train.input_dim || arch.num_classes != train.num_classes {
            return Err(Error::shape("model does not match the training set"));
        }
        if model.has_primes() != frame.is_some() || model.has_primes() != cfg.mode.uses_primes() {
            return Err(Error::config(format!(
                "mode {} is inconsistent with the model/frame",
                cfg.mode.as_str()
            )));
        }
        if let Some(f) = &frame {
            if f.dim() != arch.feature_dim() || f.num_vertices() != train.num_biases {
                return Err(Error::shape(format!(
                    "frame is {}x{}, need {}x{}",
                    f.dim(),
                    f.num_vertices(),
                    arch.feature_dim(),
                    train.num_biases
                )));
            }
        }
        if let Some(t) = test {
            if t.input_dim != train.input_dim || t.num_classes != train.num_classes {
                return Err(Error::shape("test set does not match the training set"));
            }
        }
        let optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &model);
        Ok(Self {
            cfg: cfg.clone(),
            train,
            test,
            model,
            frame,
            optimizer,
            shuffle: Rng::new(cfg.seed, streams::SHUFFLE),
            order: (0..train.len()).collect(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn frame(&self) -> Option<&EtfFrame> {
        self.frame.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One pass over the shuffled training set. Returns the sample-mean CE
    /// and RE losses, each measured before the update of its batch.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
        self.shuffle.shuffle(&mut self.order);
        let alpha = self.cfg.effective_alpha();
        let (mut ce, mut re) = (0.0, 0.0);
        let order = std::mem::take(&mut self.order);
        for (b, batch) in order.chunks(self.cfg.batch).enumerate() {
            let mut sums = batch_objective(
                &self.model,
                self.frame.as_ref(),
                self.train,
                batch,
                alpha,
                self.cfg.threads,
            )?;
            sums.grads.scale(1.0 / batch.len() as f64);
            let max_abs_grad = sums.grads.max_abs();
            let finite = sums.grads.slices().iter().all(|s| s.iter().all(|g| g.is_finite()));
            if !(finite && sums.ce.is_finite() && sums.re.is_finite()) {
                self.order = order;
                return Err(Error::NonFinite {
                    epoch,
                    batch: b,
                    max_abs_grad,
                });
            }
            ce += sums.ce;
            re += sums.re;
            self.optimizer.apply(&mut self.model, &sums.grads);
        }
        self.order = order;
        let n = self.train.len() as f64;
        Ok((ce / n, re / n))
    }

    /// Evaluates the current model. Uses no randomness.
    pub fn log(&self, epoch: usize, losses: (f64, f64), with_nc: bool) -> Result<EpochLog> {
        let frame = self.frame.as_ref();
        let tr = evaluate(&self.model, frame, self.train, PrimePolicy::Null)?;
        let te = self
            .test
            .map(|t| evaluate(&self.model, frame, t, PrimePolicy::Null))
            .transpose()?;
        let mut log = EpochLog {
            epoch,
            loss_ce: losses.0,
            loss_re: losses.1,
            acc_train_aligned: tr.aligned,
            acc_train_conflicting: tr.conflicting,
            acc_test_unbiased: te.as_ref().map(|r| r.overall),
            acc_test_aligned: te.as_ref().and_then(|r| r.aligned),
            acc_test_conflicting: te.as_ref().and_then(|r| r.conflicting),
            nc1: None,
            nc2: None,
            nc3: None,
            nc4_agreement: None,
            nc1_aligned: None,
            nc1_conflicting: None,
        };
        if with_nc {
            let ds = match (self.cfg.nc_on_test, self.test) {
                (true, Some(t)) => t,
                (true, None) => return Err(Error::config("NC metrics on test features need a test set")),
                (false, _) => self.train,
            };
            let z = extract_features(&self.model, ds)?;
            let labels: Vec<usize> = ds.samples.iter().map(|s| s.label).collect();
            let aligned: Vec<bool> = ds.samples.iter().map(|s| s.aligned).collect();
            let w = self.model.classifier.w_block();
            let r = subset_report(
                &z,
                &labels,
                &aligned,
                ds.num_classes,
                Some((&w, &self.model.classifier.bias)),
            )?;
            log.nc1 = r.all.nc1;
            log.nc2 = r.all.nc2;
            log.nc3 = r.all.nc3;
            log.nc4_agreement = r.all.nc4_agreement;
            log.nc1_aligned = r.aligned.nc1;
            log.nc1_conflicting = r.conflicting.nc1;
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let arch = self.model.architecture();
        Checkpoint {
            meta: CheckpointMeta {
                feature_dim: arch.feature_dim(),
                architecture: arch,
                mode: self.cfg.mode,
                num_classes: self.train.num_classes,
                num_biases: self.train.num_biases,
                alpha: self.cfg.effective_alpha(),
                seed: self.cfg.seed,
                frame: self.frame.as_ref().map(EtfFrame::kind),
            },
            model: self.model.clone(),
            frame: self.frame.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<EpochLog>,
}

/// Full run: `cfg.epochs` epochs, logging every `eval_every` epochs and at the
/// end. `on_log` sees each log row as soon as it is produced.
pub fn train_run(
    train: &BiasedDataset,
    test: Option<&BiasedDataset>,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train.split != Split::Train {
        return Err(Error::config("training data must be a train split"));
    }
    let mut trainer = Trainer::new(train, test, cfg)?;
    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let losses = trainer.run_epoch(epoch)?;
        let last = epoch == cfg.epochs;
        if last || epoch % cfg.eval_every == 0 {
            let nc = last || (cfg.nc_every > 0 && epoch % cfg.nc_every == 0);
            let log = trainer.log(epoch, losses, nc)?;
            on_log(&log);
            logs.push(log);
        }
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        logs,
    })
}

/// Frame kind a mode trains with.
pub fn frame_kind(mode: Mode) -> Option<PrimeKind> {
    match mode {
        Mode::Vanilla => None,
        Mode::EtfDebias => Some(PrimeKind::Etf),
        Mode::RandomPrime => Some(PrimeKind::Random),
    }
}
