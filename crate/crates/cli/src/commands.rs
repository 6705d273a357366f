use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use etf_debias::data::{
    build_colored_mnist, decode_dataset, default_palette, encode_dataset, gen_two_signal,
    gen_unbiased_test, parse_idx, BiasedDataset, Split, TwoSignalParams,
};
use etf_debias::etf::{EtfFrame, PrimeKind};
use etf_debias::gradcheck::{a_alignment, check_model, ordering_check, DecompositionReport, OrderingReport};
use etf_debias::metrics::{
    nc_report, subset_report, FeatureDump, Subset, FLAG_TEST_SPLIT,
};
use etf_debias::model::Checkpoint;
use etf_debias::numerics::{streams, Matrix, Rng};
use etf_debias::train::{
    evaluate, extract_features, train_run, write_log_csv, EpochLog, PrimePolicy, TrainConfig,
};
use etf_debias::{file_crc32, Error};

use crate::{
    EvalArgs, Failure, FeaturesArgs, GenArgs, GradArgs, Kind, MetricsArgs, SplitArg, SubsetArg,
    TrainArgs, VerifyArgs, What, EXIT_VERIFY,
};

const SEED_ENV: &str = "ETFDEBIAS_SEED";
const ETF_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-10;

type CmdResult = Result<(), Failure>;

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::usage(format!("{SEED_ENV}={s:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn print_json<T: Serialize>(value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::from(e)))?;
    println!("{text}");
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::from(Error::from(e)))?;
    fs::write(path, text + "\n").map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

/// Reads a dataset and the CRC32 of the exact bytes it was decoded from.
fn load_dataset(path: &Path) -> Result<(BiasedDataset, u32), Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let ds = decode_dataset(&bytes).map_err(|e| with_path(e, path))?;
    Ok((ds, file_crc32(&bytes)))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Failure {
    let mut f = Failure::from(e);
    f.message = format!("{}: {}", path.display(), f.message);
    f
}

#[derive(Serialize)]
struct GenSidecar {
    kind: &'static str,
    split: Split,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    two_signal: Option<TwoSignalParams>,
    ratio: f64,
    records: usize,
    conflicting: usize,
    num_classes: usize,
    input_dim: usize,
    crc32: u32,
}

pub fn gen(a: GenArgs) -> CmdResult {
    let seed = match a.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let stream = match split {
        Split::Train => streams::TRAIN_DATA,
        Split::Test => streams::TEST_DATA,
    };
    let mut rng = Rng::new(seed, stream);
    let (ds, two_signal, kind) = match a.kind {
        Kind::TwoSignal => {
            let params = TwoSignalParams {
                num_classes: a.k,
                n_per_class: a.n,
                ratio: a.ratio,
                mu_core: a.mu_core,
                mu_bias: a.mu_bias,
                sigma: a.sigma,
                noise_dim: a.noise_dim,
            };
            let ds = match split {
                Split::Train => gen_two_signal(&params, &mut rng)?,
                Split::Test => gen_unbiased_test(&params, a.n, &mut rng)?,
            };
            (ds, Some(params), "two-signal")
        }
        Kind::ColoredMnist => {
            let (Some(img), Some(lbl)) = (&a.mnist_images, &a.mnist_labels) else {
                return Err(Failure::usage(
                    "--kind colored-mnist needs --mnist-images and --mnist-labels",
                ));
            };
            if a.k != 10 {
                return Err(Failure::usage("--k must be 10 for colored-mnist"));
            }
            let images = parse_idx(img).map_err(|e| with_path(e, img))?;
            let labels = parse_idx(lbl).map_err(|e| with_path(e, lbl))?;
            let ds = build_colored_mnist(&images, &labels, a.ratio, &default_palette(), split, &mut rng)?;
            (ds, None, "colored-mnist")
        }
    };
    let bytes = encode_dataset(&ds)?;
    fs::write(&a.out, &bytes).map_err(|e| Failure::io(format!("{}: {e}", a.out.display())))?;
    let sidecar = GenSidecar {
        kind,
        split,
        seed,
        two_signal,
        ratio: ds.ratio.value(),
        records: ds.len(),
        conflicting: ds.conflicting_total(),
        num_classes: ds.num_classes,
        input_dim: ds.input_dim,
        crc32: file_crc32(&bytes),
    };
    write_json(&sidecar_path(&a.out), &sidecar)
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Flags over `--config` over the seed env var over defaults.
fn resolve_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut seed_from_file = false;
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| with_path(e.into(), path))?;
            seed_from_file = value.get("seed").is_some();
            serde_json::from_value::<TrainConfig>(value)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if !seed_from_file {
        if let Some(s) = env_seed()? {
            cfg.seed = s;
        }
    }
    if let Some(m) = &a.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(o) = &a.optimizer {
        cfg.optimizer = o.parse()?;
    }
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => {
            $(if let Some(v) = a.$flag { cfg.$field = v; })*
        };
    }
    set!(alpha <- alpha, epochs <- epochs, batch <- batch, lr <- lr, weight_decay <- wd,
         seed <- seed, eval_every <- eval_every, nc_every <- nc_every, hidden <- hidden,
         feature_dim <- feature_dim, threads <- threads);
    if a.nc_on_test {
        cfg.nc_on_test = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct DatasetRef {
    path: PathBuf,
    crc32: u32,
    records: usize,
}

#[derive(Serialize)]
struct RunManifest {
    config: TrainConfig,
    train: DatasetRef,
    test: Option<DatasetRef>,
    frame_fingerprint: Option<u32>,
    checkpoint_crc32: u32,
    version: &'static str,
    started_unix_secs: u64,
    wall_clock_secs: f64,
    final_log: Option<EpochLog>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn train(a: TrainArgs) -> CmdResult {
    let cfg = resolve_config(&a)?;
    let (train, train_crc) = load_dataset(&a.train)?;
    let test = a.test.as_deref().map(load_dataset).transpose()?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Failure::io(format!("{}: {e}", a.out_dir.display())))?;

    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let clock = Instant::now();
    let outcome = train_run(&train, test.as_ref().map(|(ds, _)| ds), &cfg, |log| {
        println!(
            "epoch {} loss_ce {:.6} loss_re {:.6} acc_unbiased {} acc_conflicting {}",
            log.epoch,
            log.loss_ce,
            log.loss_re,
            fmt_opt(log.acc_test_unbiased),
            fmt_opt(log.acc_test_conflicting),
        );
    })?;
    let wall_clock_secs = clock.elapsed().as_secs_f64();

    let ckpt_path = a.out_dir.join("checkpoint.etfc");
    let ckpt_bytes = etf_debias::model::encode_checkpoint(&outcome.checkpoint)?;
    fs::write(&ckpt_path, &ckpt_bytes).map_err(|e| Failure::io(format!("{}: {e}", ckpt_path.display())))?;
    let log_path = a.out_dir.join("log.csv");
    let file = fs::File::create(&log_path).map_err(|e| Failure::io(format!("{}: {e}", log_path.display())))?;
    write_log_csv(&outcome.logs, file)?;

    let manifest = RunManifest {
        config: cfg,
        train: DatasetRef {
            path: a.train.clone(),
            crc32: train_crc,
            records: train.len(),
        },
        test: test.as_ref().zip(a.test.as_ref()).map(|((ds, crc), path)| DatasetRef {
            path: path.clone(),
            crc32: *crc,
            records: ds.len(),
        }),
        frame_fingerprint: outcome.checkpoint.frame.as_ref().map(EtfFrame::fingerprint),
        checkpoint_crc32: file_crc32(&ckpt_bytes),
        version: env!("CARGO_PKG_VERSION"),
        started_unix_secs: started,
        wall_clock_secs,
        final_log: outcome.logs.last().cloned(),
    };
    write_json(&a.out_dir.join("manifest.json"), &manifest)
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let policy: PrimePolicy = a.prime_policy.parse()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (ds, _) = load_dataset(&a.data)?;
    let report = evaluate(&ckpt.model, ckpt.frame.as_ref(), &ds, policy)?;
    print_json(&report)
}

pub fn metrics(a: MetricsArgs) -> CmdResult {
    let dump = FeatureDump::load(&a.features).map_err(|e| with_path(e, &a.features))?;
    let ckpt = a.weights.as_deref().map(load_checkpoint).transpose()?;
    let classifier = ckpt.as_ref().map(|c| (c.model.classifier.w_block(), c.model.classifier.bias.clone()));
    if let Some((w, _)) = &classifier {
        if w.shape() != (dump.features.cols(), dump.num_classes) {
            return Err(Failure::usage(format!(
                "classifier block is {:?}, features need {}×{}",
                w.shape(),
                dump.features.cols(),
                dump.num_classes
            )));
        }
    }
    let cls = classifier.as_ref().map(|(w, b)| (w, b.as_slice()));
    let (f, l, k) = (&dump.features, &dump.labels, dump.num_classes);
    match a.subset {
        SubsetArg::Every => print_json(&subset_report(f, l, &dump.aligned, k, cls)?),
        SubsetArg::All => print_json(&nc_report(Subset::All, f, l, k, cls)),
        SubsetArg::Aligned | SubsetArg::Conflicting => {
            let want = a.subset == SubsetArg::Aligned;
            let reports = subset_report(f, l, &dump.aligned, k, cls)?;
            print_json(if want { &reports.aligned } else { &reports.conflicting })
        }
    }
}

#[derive(Serialize)]
struct EtfVerification {
    what: &'static str,
    source: String,
    kind: PrimeKind,
    num_vertices: usize,
    dim: usize,
    /// Largest `| ‖m_b‖ − 1 |`.
    max_norm_error: f64,
    /// Largest Gram deviation from the simplex target; informational for
    /// random primes.
    max_gram_error: f64,
    tolerance: f64,
    pass: bool,
}

fn verify_frame(frame: &EtfFrame, source: String) -> EtfVerification {
    let m = frame.primes();
    let max_norm_error = (0..m.cols())
        .map(|b| (etf_debias::numerics::norm(&m.column(b)) - 1.0).abs())
        .fold(0.0, f64::max);
    let report = frame.validate(ETF_TOL);
    let pass = match frame.kind() {
        PrimeKind::Etf => report.ok && max_norm_error <= ETF_TOL,
        PrimeKind::Random => max_norm_error <= ETF_TOL,
    };
    EtfVerification {
        what: "etf",
        source,
        kind: frame.kind(),
        num_vertices: frame.num_vertices(),
        dim: frame.dim(),
        max_norm_error,
        max_gram_error: report.max_gram_error,
        tolerance: ETF_TOL,
        pass,
    }
}

fn finish(pass: bool, what: &str) -> CmdResult {
    if pass {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_VERIFY,
            message: format!("{what} verification failed"),
        })
    }
}

pub fn verify(a: VerifyArgs) -> CmdResult {
    match a.what {
        What::Etf => {
            let report = if let Some(path) = &a.checkpoint {
                let ckpt = load_checkpoint(path)?;
                let frame = ckpt
                    .frame
                    .ok_or_else(|| Failure::usage(format!("{} has no prime frame", path.display())))?;
                verify_frame(&frame, path.display().to_string())
            } else {
                let (Some(k), Some(d)) = (a.k, a.d) else {
                    return Err(Failure::usage("--what etf needs --k and --d, or --checkpoint"));
                };
                let seed = match a.seed {
                    Some(s) => s,
                    None => env_seed()?.unwrap_or(0),
                };
                let frame = EtfFrame::build(d, k, &mut Rng::new(seed, streams::FRAME))?;
                verify_frame(&frame, format!("seed {seed}"))
            };
            print_json(&report)?;
            finish(report.pass, "frame")
        }
        What::Grad => {
            let (Some(checkpoint), Some(data)) = (a.checkpoint, a.data) else {
                return Err(Failure::usage("--what grad needs --checkpoint and --data"));
            };
            gradcheck(GradArgs {
                checkpoint,
                data,
                batch: a.batch,
                seed: a.seed,
            })
        }
    }
}

#[derive(Serialize)]
struct GradVerification {
    what: &'static str,
    tolerance: f64,
    decomposition: DecompositionReport,
    max_residual: f64,
    ordering: Option<OrderingReport>,
    /// `cos(a_k, m_k)` per class; empty without a prime block.
    a_alignment: Vec<f64>,
    pass: bool,
}

pub fn gradcheck(a: GradArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (ds, _) = load_dataset(&a.data)?;
    let arch = ckpt.model.architecture();
    if arch.input_dim() != ds.input_dim || arch.num_classes != ds.num_classes {
        return Err(Failure::usage(format!(
            "checkpoint expects d_in={} K={}, data has d_in={} K={}",
            arch.input_dim(),
            arch.num_classes,
            ds.input_dim,
            ds.num_classes
        )));
    }
    if a.batch == 0 || ds.is_empty() {
        return Err(Failure::usage("--batch and the dataset must be non-empty"));
    }
    let seed = a.seed.unwrap_or(ckpt.meta.seed);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    Rng::new(seed, streams::ANALYSIS).shuffle(&mut idx);
    idx.truncate(a.batch);

    let x = ds.inputs(&idx);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.samples[i].label).collect();
    let aligned: Vec<bool> = idx.iter().map(|&i| ds.samples[i].aligned).collect();
    let primes = match &ckpt.frame {
        Some(frame) if ckpt.model.has_primes() => {
            let m = frame.primes();
            let mut out = Matrix::zeros(idx.len(), m.rows());
            for (r, &i) in idx.iter().enumerate() {
                let b = ds.samples[i].bias;
                if b >= m.cols() {
                    return Err(Error::Index { index: b, len: m.cols() }.into());
                }
                for j in 0..m.rows() {
                    out[(r, j)] = m[(j, b)];
                }
            }
            out
        }
        _ if ckpt.model.has_primes() => {
            return Err(Failure::usage("primed checkpoint has no frame"));
        }
        _ => Matrix::zeros(idx.len(), 0),
    };
    let decomposition = check_model(&ckpt.model, &x, &primes, &labels, &aligned)?;
    let max_residual = decomposition.max_residual();
    let ordering = ckpt
        .frame
        .as_ref()
        .filter(|f| f.kind() == PrimeKind::Etf)
        .map(ordering_check);
    let alignment = match &ckpt.frame {
        Some(f) if ckpt.model.has_primes() => a_alignment(&ckpt.model, f)?,
        _ => Vec::new(),
    };
    let pass = max_residual <= GRAD_TOL && ordering.as_ref().is_none_or(|o| o.holds);
    print_json(&GradVerification {
        what: "grad",
        tolerance: GRAD_TOL,
        decomposition,
        max_residual,
        ordering,
        a_alignment: alignment,
        pass,
    })?;
    finish(pass, "gradient decomposition")
}

pub fn features(a: FeaturesArgs) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (ds, _) = load_dataset(&a.data)?;
    let feats = extract_features(&ckpt.model, &ds)?;
    let flags = if ds.split == Split::Test { FLAG_TEST_SPLIT } else { 0 };
    FeatureDump::from_dataset(feats, &ds, flags)?
        .save(&a.out)
        .map_err(|e| with_path(e, &a.out))
}
