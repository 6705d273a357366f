//! MLP backbone producing learnable features `z`, and a linear classifier
//! over the concatenation `[z; m]` of features and prime.
//!
//! All passes are batched: row `i` of every matrix belongs to sample `i`.
//! No batch statistics are used anywhere, so a batch forward equals the
//! per-sample forwards stacked.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointMeta};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Training mode; decides whether the classifier has a prime path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Vanilla,
    EtfDebias,
    RandomPrime,
}

impl Mode {
    pub fn uses_primes(self) -> bool {
        !matches!(self, Mode::Vanilla)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::EtfDebias => "etf-debias",
            Mode::RandomPrime => "random-prime",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "etf-debias" => Ok(Mode::EtfDebias),
            "random-prime" => Ok(Mode::RandomPrime),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Layer widths `[d_in, h_1, …, d]` plus the classifier shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Rows of the prime block of the classifier; 0 for vanilla, `d` otherwise.
    pub prime_dim: usize,
}

impl Architecture {
    /// Three-layer MLP `d_in → hidden → hidden → feature_dim`.
    pub fn mlp3(input_dim: usize, hidden: usize, feature_dim: usize, num_classes: usize, primed: bool) -> Self {
        Self {
            widths: vec![input_dim, hidden, hidden, feature_dim],
            num_classes,
            prime_dim: if primed { feature_dim } else { 0 },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config("architecture needs at least input and feature widths"));
        }
        if self.widths.contains(&0) || self.num_classes == 0 {
            return Err(Error::config(format!(
                "zero-width layer in {:?} / {} classes",
                self.widths, self.num_classes
            )));
        }
        if self.prime_dim != 0 && self.prime_dim != self.feature_dim() {
            return Err(Error::config(format!(
                "prime dimension {} must equal the feature dimension {}",
                self.prime_dim,
                self.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Affine layer `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn he(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            weight: Matrix::from_fn(fan_in, fan_out, |_, _| std * rng.normal()),
            bias: vec![0.0; fan_out],
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        for i in 0..y.rows() {
            for (v, &b) in y.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    /// Returns `(dW, db, dx)`.
    fn backward(&self, x: &Matrix, dy: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
        let dw = x.t_matmul(dy)?;
        let db = column_sums(dy);
        let dx = dy.matmul_t(&self.weight)?;
        Ok((dw, db, dx))
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    out
}

/// Feed-forward backbone; ReLU after every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpBackbone {
    pub layers: Vec<Dense>,
}

/// Intermediates of a backbone pass. `pre[l]` is layer `l`'s affine output;
/// `act[l]` its activation (equal to `pre[l]` for the last layer).
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    pub input: Matrix,
    pub pre: Vec<Matrix>,
    pub act: Vec<Matrix>,
}

impl BackboneTrace {
    pub fn features(&self) -> &Matrix {
        self.act.last().expect("at least one layer")
    }
}

impl MlpBackbone {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("nonempty").weight.cols()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.cols()));
        w
    }

    pub fn forward(&self, x: &Matrix) -> Result<BackboneTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "backbone expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer.forward(if l == 0 { x } else { &act[l - 1] })?;
            let a = if l == last { h.clone() } else { h.map(|v| v.max(0.0)) };
            pre.push(h);
            act.push(a);
        }
        Ok(BackboneTrace {
            input: x.clone(),
            pre,
            act,
        })
    }

    /// Features only, without retaining intermediates.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.act.pop().expect("nonempty"))
    }

    pub fn backward(&self, trace: &BackboneTrace, d_features: &Matrix) -> Result<Vec<(Matrix, Vec<f64>)>> {
        if trace.pre.len() != self.layers.len() {
            return Err(Error::shape("trace depth does not match the backbone"));
        }
        if d_features.shape() != trace.features().shape() {
            return Err(Error::shape(format!(
                "feature gradient {:?} vs features {:?}",
                d_features.shape(),
                trace.features().shape()
            )));
        }
        let last = self.layers.len() - 1;
        let mut grads = vec![(Matrix::zeros(0, 0), Vec::new()); self.layers.len()];
        let mut upstream = d_features.clone();
        for l in (0..self.layers.len()).rev() {
            let mut d_pre = upstream;
            if l != last {
                for (g, &h) in d_pre.data_mut().iter_mut().zip(trace.pre[l].data()) {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = if l == 0 { &trace.input } else { &trace.act[l - 1] };
            let (dw, db, dx) = self.layers[l].backward(input, &d_pre)?;
            grads[l] = (dw, db);
            upstream = dx;
        }
        Ok(grads)
    }
}

/// Linear classifier over `[z; m]`. `weight` is `(d + p) × K`: rows `0..d`
/// form the learnable-feature block `W`, rows `d..d+p` the prime block `A`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimedClassifier {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub feature_dim: usize,
}

#[derive(Clone, Debug)]
pub struct ClassifierTrace {
    /// `[z, m]` per row.
    pub joint: Matrix,
    pub logits: Matrix,
}

impl PrimedClassifier {
    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn prime_dim(&self) -> usize {
        self.weight.rows() - self.feature_dim
    }

    /// The `d×K` block acting on learnable features.
    pub fn w_block(&self) -> Matrix {
        self.weight.row_range(0, self.feature_dim)
    }

    /// The `p×K` block acting on primes (empty for vanilla).
    pub fn a_block(&self) -> Matrix {
        self.weight.row_range(self.feature_dim, self.weight.rows())
    }

    /// `logits = [z, m]·W̃ + bias`. `primes` must be given iff the classifier
    /// has a prime block.
    pub fn forward(&self, z: &Matrix, primes: Option<&Matrix>) -> Result<ClassifierTrace> {
        if z.cols() != self.feature_dim {
            return Err(Error::shape(format!(
                "classifier expects {} features, got {}",
                self.feature_dim,
                z.cols()
            )));
        }
        let p = self.prime_dim();
        let joint = match (p, primes) {
            (0, None) => z.clone(),
            (0, Some(_)) => return Err(Error::shape("primes supplied to a classifier without a prime block")),
            (_, None) => return Err(Error::shape("classifier with a prime block needs primes")),
            (_, Some(m)) => {
                if m.shape() != (z.rows(), p) {
                    return Err(Error::shape(format!(
                        "primes {:?}, expected {:?}",
                        m.shape(),
                        (z.rows(), p)
                    )));
                }
                Matrix::from_fn(z.rows(), self.feature_dim + p, |i, j| {
                    if j < self.feature_dim {
                        z[(i, j)]
                    } else {
                        m[(i, j - self.feature_dim)]
                    }
                })
            }
        };
        let mut logits = joint.matmul(&self.weight)?;
        for i in 0..logits.rows() {
            for (v, &b) in logits.row_mut(i).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(ClassifierTrace { joint, logits })
    }

    /// Returns `(dW̃, dbias, dz)`. Only the learnable block of the input
    /// receives a gradient; primes are constants.
    pub fn backward(&self, trace: &ClassifierTrace, d_logits: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
        if d_logits.shape() != trace.logits.shape() {
            return Err(Error::shape(format!(
                "logit gradient {:?} vs logits {:?}",
                d_logits.shape(),
                trace.logits.shape()
            )));
        }
        if trace.joint.cols() != self.weight.rows() {
            return Err(Error::shape("classifier trace does not match the classifier"));
        }
        let dw = trace.joint.t_matmul(d_logits)?;
        let db = column_sums(d_logits);
        let dz = d_logits.matmul_t(&self.w_block())?;
        Ok((dw, db, dz))
    }
}

/// Backbone plus classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: MlpBackbone,
    pub classifier: PrimedClassifier,
}

/// Full intermediates of one forward call.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub backbone: BackboneTrace,
    pub head: ClassifierTrace,
}

impl ForwardTrace {
    pub fn features(&self) -> &Matrix {
        self.backbone.features()
    }

    pub fn logits(&self) -> &Matrix {
        &self.head.logits
    }
}

/// Gradients with the same layout as [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Matrix, Vec<f64>)>,
    pub classifier_weight: Matrix,
    pub classifier_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .backbone
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.weight.rows(), l.weight.cols()), vec![0.0; l.bias.len()]))
                .collect(),
            classifier_weight: Matrix::zeros(model.classifier.weight.rows(), model.classifier.weight.cols()),
            classifier_bias: vec![0.0; model.classifier.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .into_iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Flat views in parameter order: per layer (weight, bias), then
    /// classifier weight and bias.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for (w, b) in &self.layers {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out.push(self.classifier_weight.data());
        out.push(self.classifier_bias.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for (w, b) in &mut self.layers {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out.push(self.classifier_weight.data_mut());
        out.push(self.classifier_bias.as_mut_slice());
        out
    }
}

impl Model {
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self> {
        let (backbone, classifier) = init_params(arch, rng)?;
        Ok(Self { backbone, classifier })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            widths: self.backbone.widths(),
            num_classes: self.classifier.num_classes(),
            prime_dim: self.classifier.prime_dim(),
        }
    }

    pub fn has_primes(&self) -> bool {
        self.classifier.prime_dim() > 0
    }

    pub fn forward(&self, x: &Matrix, primes: Option<&Matrix>) -> Result<ForwardTrace> {
        let backbone = self.backbone.forward(x)?;
        let head = self.classifier.forward(backbone.features(), primes)?;
        Ok(ForwardTrace { backbone, head })
    }

    /// Single-sample convenience wrapper around [`Model::forward`].
    pub fn forward_one(&self, x: &[f64], prime: Option<&[f64]>) -> Result<ForwardTrace> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let pm = prime
            .map(|m| Matrix::from_vec(1, m.len(), m.to_vec()))
            .transpose()?;
        self.forward(&xm, pm.as_ref())
    }

    /// Exact gradients of `Σ_i d_logits[i]·logits[i]` w.r.t. all parameters.
    /// Returns the parameter gradients and the gradient w.r.t. `z`.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: &Matrix) -> Result<(Gradients, Matrix)> {
        let (cw, cb, dz) = self.classifier.backward(&trace.head, d_logits)?;
        let layers = self.backbone.backward(&trace.backbone, &dz)?;
        Ok((
            Gradients {
                layers,
                classifier_weight: cw,
                classifier_bias: cb,
            },
            dz,
        ))
    }

    /// Parameter views in the same order as [`Gradients::slices`], each with
    /// a flag telling whether weight decay applies (weights yes, biases no).
    pub fn param_slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = Vec::new();
        for l in &mut self.backbone.layers {
            out.push((l.weight.data_mut(), true));
            out.push((l.bias.as_mut_slice(), false));
        }
        out.push((self.classifier.weight.data_mut(), true));
        out.push((self.classifier.bias.as_mut_slice(), false));
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.backbone.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out.push(self.classifier.weight.data());
        out.push(self.classifier.bias.as_slice());
        out
    }
}

/// He-normal weights (`N(0, 2/fan_in)`), zero biases.
pub fn init_params(arch: &Architecture, rng: &mut Rng) -> Result<(MlpBackbone, PrimedClassifier)> {
    arch.validate()?;
    let layers = arch
        .widths
        .windows(2)
        .map(|w| Dense::he(w[0], w[1], rng))
        .collect();
    let d = arch.feature_dim();
    let head = Dense::he(d + arch.prime_dim, arch.num_classes, rng);
    Ok((
        MlpBackbone { layers },
        PrimedClassifier {
            weight: head.weight,
            bias: head.bias,
            feature_dim: d,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture {
            widths: vec![5, 4, 3],
            num_classes: 3,
            prime_dim: 3,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = Model::init(&small_arch(), &mut Rng::new(1, 3)).unwrap();
        let b = Model::init(&small_arch(), &mut Rng::new(1, 3)).unwrap();
        assert_eq!(a, b);
        assert!(a.backbone.layers.iter().all(|l| l.bias.iter().all(|&x| x == 0.0)));
        assert!(a.classifier.bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn he_std_784_to_100() {
        let arch = Architecture {
            widths: vec![784, 100],
            num_classes: 10,
            prime_dim: 0,
        };
        let m = Model::init(&arch, &mut Rng::new(0, 3)).unwrap();
        let w = m.backbone.layers[0].weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let want = (2.0f64 / 784.0).sqrt();
        assert!((std / want - 1.0).abs() < 0.1, "{std} vs {want}");
    }

    #[test]
    fn zero_width_rejected() {
        let mut arch = small_arch();
        arch.widths[1] = 0;
        assert!(matches!(Model::init(&arch, &mut Rng::new(0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut m = Model::init(&small_arch(), &mut Rng::new(0, 0)).unwrap();
        for s in m.param_slices_mut() {
            s.0.iter_mut().for_each(|x| *x = 0.0);
        }
        m.classifier.bias = vec![0.5, -1.0, 2.0];
        let t = m.forward_one(&[1.0, 2.0, 3.0, 4.0, 5.0], Some(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(t.logits().row(0), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn null_prime_ignores_a_block() {
        let m = Model::init(&small_arch(), &mut Rng::new(4, 0)).unwrap();
        let x = [0.3, -0.2, 1.0, 0.0, 0.7];
        let before = m.forward_one(&x, Some(&[0.0; 3])).unwrap();
        let mut perturbed = m.clone();
        for i in 3..6 {
            for k in 0..3 {
                perturbed.classifier.weight[(i, k)] += 10.0 * (i + k) as f64;
            }
        }
        let after = perturbed.forward_one(&x, Some(&[0.0; 3])).unwrap();
        assert_eq!(before.logits(), after.logits());
    }

    #[test]
    fn dimension_errors() {
        let m = Model::init(&small_arch(), &mut Rng::new(0, 0)).unwrap();
        assert!(m.forward_one(&[1.0; 4], Some(&[0.0; 3])).is_err());
        assert!(m.forward_one(&[1.0; 5], Some(&[0.0; 2])).is_err());
        assert!(m.forward_one(&[1.0; 5], None).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = Model::init(&small_arch(), &mut Rng::new(2, 0)).unwrap();
        let t = m.forward_one(&[0.1, 0.2, 0.3, 0.4, 0.5], Some(&[1.0, 0.0, 0.0])).unwrap();
        let (g, dz) = m.backward(&t, &Matrix::zeros(1, 3)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(dz.max_abs(), 0.0);
    }

    #[test]
    fn backward_rejects_mismatched_trace() {
        let m = Model::init(&small_arch(), &mut Rng::new(2, 0)).unwrap();
        let t = m.forward_one(&[0.1; 5], Some(&[0.0; 3])).unwrap();
        assert!(m.backward(&t, &Matrix::zeros(2, 3)).is_err());
        let other = Model::init(
            &Architecture {
                widths: vec![5, 4, 4, 3],
                num_classes: 3,
                prime_dim: 3,
            },
            &mut Rng::new(2, 0),
        )
        .unwrap();
        assert!(other.backward(&t, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn hand_computed_linear_case() {
        // Single linear layer backbone 2→2 (identity), classifier 2→2 without primes.
        let m = Model {
            backbone: MlpBackbone {
                layers: vec![Dense {
                    weight: Matrix::identity(2),
                    bias: vec![0.0, 0.0],
                }],
            },
            classifier: PrimedClassifier {
                weight: Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
                bias: vec![0.0, 0.0],
                feature_dim: 2,
            },
        };
        let x = [0.5, -1.0];
        let t = m.forward_one(&x, None).unwrap();
        // logits = [0.5 - 3, 1 - 4]
        assert_eq!(t.logits().row(0), &[-2.5, -3.0]);
        let g = Matrix::from_rows(&[[1.0, -2.0]]);
        let (grads, dz) = m.backward(&t, &g).unwrap();
        // dW̃ = zᵀ g = [[0.5, -1], [-1, 2]]
        assert_eq!(grads.classifier_weight, Matrix::from_rows(&[[0.5, -1.0], [-1.0, 2.0]]));
        // dz = g W̃ᵀ = [1 - 4, 3 - 8]
        assert_eq!(dz.row(0), &[-3.0, -5.0]);
        // backbone weight (identity) gradient: xᵀ dz
        assert_eq!(
            grads.layers[0].0,
            Matrix::from_rows(&[[-1.5, -2.5], [3.0, 5.0]])
        );
        assert_eq!(grads.classifier_bias, vec![1.0, -2.0]);
    }
}
