//! Generalized linear model training.
//!
//! Multinomial logistic regression (softmax, or sigmoid for a single
//! output) plus a Gaussian/least-squares family kept for theory checks.
//! Training is minibatch SGD or ADAM under one of four regularization
//! schemes: none, l2, feature dropout, feature grouping.
//!
//! Feature grouping follows the projected-gradient scheme: draw a grouping
//! matrix from the bank, compute the gradient with respect to the reduced
//! weights `W_hat = W phi^T` on projected inputs `phi x`, and back-project
//! the step onto `W`. Dropout is the same loop with the grouping matrix
//! replaced by a random diagonal mask. With an identity matrix in place of
//! `phi` both paths perform the exact same floating-point operations as the
//! unregularized trainer, so their trajectories collapse bit for bit --
//! tests rely on this.

use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::bank::{BankPolicy, ProjectionBank};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::linalg::{axpy, dot, DenseMatrix, SparseGrouping};
use crate::rng::RngState;

const MODEL_MAGIC: &[u8; 4] = b"FGW1";

/// GLM family: log-partition function and its derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlmFamily {
    /// `A(z) = z^2 / 2`, constant conditional variance.
    Gaussian,
    /// `A(z) = log(1 + e^z)`, conditional variance `sigma(z)(1 - sigma(z))`.
    Logistic,
}

impl GlmFamily {
    pub fn a(&self, z: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 0.5 * z * z,
            GlmFamily::Logistic => softplus(z),
        }
    }

    pub fn a_prime(&self, z: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => z,
            GlmFamily::Logistic => sigmoid(z),
        }
    }

    pub fn a_double_prime(&self, z: f64) -> f64 {
        match self {
            GlmFamily::Gaussian => 1.0,
            GlmFamily::Logistic => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    /// Negative log-likelihood up to the `h(y)` carrier term, which is
    /// independent of the parameters and cancels from every gradient.
    pub fn nll(&self, z: f64, y: f64) -> f64 {
        self.a(z) - y * z
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(GlmFamily::Gaussian),
            "logistic" => Ok(GlmFamily::Logistic),
            other => Err(Error::InvalidArgument(format!("unknown family {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GlmFamily::Gaussian => "gaussian",
            GlmFamily::Logistic => "logistic",
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Linear model: weights `W` (outputs x p), bias, and family.
#[derive(Clone, Debug, PartialEq)]
pub struct GlmModel {
    weights: DenseMatrix,
    bias: Vec<f64>,
    family: GlmFamily,
}

impl GlmModel {
    /// Zero-initialized model. The problem is convex, so zero init also
    /// removes initialization variance between regularizers.
    pub fn zeros(outputs: usize, p: usize, family: GlmFamily) -> Self {
        GlmModel {
            weights: DenseMatrix::zeros(outputs, p),
            bias: vec![0.0; outputs],
            family,
        }
    }

    pub fn new(weights: DenseMatrix, bias: Vec<f64>, family: GlmFamily) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch(format!(
                "{} weight rows but {} bias entries",
                weights.rows(),
                bias.len()
            )));
        }
        if !weights.is_finite() || !bias.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(GlmModel {
            weights,
            bias,
            family,
        })
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn p(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DenseMatrix {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn family(&self) -> GlmFamily {
        self.family
    }

    /// Binary serialization: magic `FGW1`, little-endian u32 output count,
    /// u64 p, row-major f64 weights, then f64 biases.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MODEL_MAGIC).map_err(io)?;
        w.write_all(&(self.outputs() as u32).to_le_bytes())
            .map_err(io)?;
        w.write_all(&(self.p() as u64).to_le_bytes()).map_err(io)?;
        for v in self.weights.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        for v in &self.bias {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// The format does not carry the family, so the caller states it
    /// (classification models are logistic).
    pub fn load(path: &Path, family: GlmFamily) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::parse(path, "truncated header"))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::parse(
                path,
                format!("bad magic {magic:?}, expected FGW1"),
            ));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)
            .map_err(|_| Error::parse(path, "truncated header"))?;
        let outputs = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)
            .map_err(|_| Error::parse(path, "truncated header"))?;
        let p = u64::from_le_bytes(b8) as usize;
        let mut weights = vec![0.0f64; outputs * p];
        for v in weights.iter_mut() {
            r.read_exact(&mut b8)
                .map_err(|_| Error::parse(path, "truncated weights"))?;
            *v = f64::from_le_bytes(b8);
        }
        let mut bias = vec![0.0f64; outputs];
        for v in bias.iter_mut() {
            r.read_exact(&mut b8)
                .map_err(|_| Error::parse(path, "truncated biases"))?;
            *v = f64::from_le_bytes(b8);
        }
        GlmModel::new(DenseMatrix::from_vec(outputs, p, weights)?, bias, family)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::adam()),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?}"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam { .. } => "adam",
        }
    }
}

/// Regularization scheme applied inside the training loop.
#[derive(Clone, Debug)]
pub enum Regularizer {
    None,
    L2 {
        lambda: f64,
    },
    Dropout {
        delta: f64,
    },
    /// Feature grouping; `lambda > 0` adds an l2 penalty on the persisted
    /// full-space weights after back-projection.
    Grouping {
        bank: Arc<ProjectionBank>,
        policy: BankPolicy,
        lambda: f64,
    },
}

impl Regularizer {
    pub fn id(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::L2 { .. } => "l2",
            Regularizer::Dropout { .. } => "dropout",
            Regularizer::Grouping { lambda, .. } => {
                if *lambda > 0.0 {
                    "grouping+l2"
                } else {
                    "grouping"
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub regularizer: Regularizer,
    pub seed: u64,
    /// Evaluate every this many epochs (1 = every epoch, 0 = never; skipped
    /// epochs record `NaN` accuracy). Timing benchmarks set 0.
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: 300,
            minibatch: 32,
            learning_rate: 1e-4,
            optimizer: Optimizer::adam(),
            regularizer: Regularizer::None,
            seed,
            eval_every: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatch == 0 {
            return Err(Error::InvalidArgument(
                "epochs and minibatch must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        match &self.regularizer {
            Regularizer::L2 { lambda } if *lambda < 0.0 => {
                Err(Error::InvalidArgument("lambda must be >= 0".into()))
            }
            Regularizer::Dropout { delta } if !(0.0..1.0).contains(delta) => Err(
                Error::InvalidArgument("dropout delta must be in [0, 1)".into()),
            ),
            Regularizer::Grouping { lambda, .. } if *lambda < 0.0 => {
                Err(Error::InvalidArgument("lambda must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
}

impl Metrics {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.test_acc)
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    /// CSV rows `epoch,train_loss,test_acc,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_acc,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.epoch, e.train_loss, e.test_acc, e.seconds
            ));
        }
        out
    }
}

/// Per-row loss and gradient coefficients for the linear scores of one
/// sample; shared by the trainer and by `loss_grad`.
fn row_loss_coeffs(family: GlmFamily, scores: &[f64], label: u32, coeffs: &mut [f64]) -> f64 {
    let l = scores.len();
    let y = label as usize;
    match (family, l) {
        (GlmFamily::Logistic, 1) => {
            let z = scores[0];
            let target = label as f64;
            coeffs[0] = sigmoid(z) - target;
            softplus(z) - target * z
        }
        (GlmFamily::Logistic, _) => {
            // Stable softmax cross-entropy.
            let mut max = scores[0];
            for &z in &scores[1..] {
                if z > max {
                    max = z;
                }
            }
            let mut sum = 0.0;
            for c in 0..l {
                let e = (scores[c] - max).exp();
                coeffs[c] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for c in 0..l {
                coeffs[c] *= inv;
            }
            coeffs[y] -= 1.0;
            max + sum.ln() - scores[y]
        }
        (GlmFamily::Gaussian, 1) => {
            let z = scores[0];
            let target = label as f64;
            coeffs[0] = z - target;
            0.5 * z * z - target * z
        }
        (GlmFamily::Gaussian, _) => {
            let mut loss = 0.0;
            for c in 0..l {
                let z = scores[c];
                let target = f64::from(c == y);
                coeffs[c] = z - target;
                loss += 0.5 * z * z - target * z;
            }
            loss
        }
    }
}

fn check_labels(outputs: usize, classes: usize, labels: &[u32]) -> Result<()> {
    let limit = if outputs == 1 { 2 } else { outputs };
    if classes > limit {
        return Err(Error::InvalidArgument(format!(
            "{classes} classes do not fit a model with {outputs} output(s)"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c as usize >= limit) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range [0, {limit})"
        )));
    }
    Ok(())
}

/// Class probabilities for each row of `x` (softmax rows for multiclass
/// logistic, sigmoid for a single logistic output, raw means for Gaussian).
pub fn forward(model: &GlmModel, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols() != model.p() {
        return Err(Error::DimensionMismatch(format!(
            "model has p={}, inputs have {} columns",
            model.p(),
            x.cols()
        )));
    }
    let l = model.outputs();
    let mut out = DenseMatrix::zeros(x.rows(), l);
    exec::for_each_row_mut(out.data_mut(), l, |i, row| {
        for c in 0..l {
            row[c] = dot(model.weights.row(c), x.row(i)) + model.bias[c];
        }
        match (model.family, l) {
            (GlmFamily::Logistic, 1) => row[0] = sigmoid(row[0]),
            (GlmFamily::Logistic, _) => {
                let mut max = row[0];
                for &z in row[1..].iter() {
                    if z > max {
                        max = z;
                    }
                }
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                let inv = 1.0 / sum;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            (GlmFamily::Gaussian, _) => {}
        }
    });
    Ok(out)
}

/// Mean loss over the batch and its gradients with respect to `W` and `b`
/// (the pure data term, no regularizer).
pub fn loss_grad(
    model: &GlmModel,
    x: &DenseMatrix,
    y: &[u32],
) -> Result<(f64, DenseMatrix, Vec<f64>)> {
    if x.cols() != model.p() {
        return Err(Error::DimensionMismatch(format!(
            "model has p={}, inputs have {} columns",
            model.p(),
            x.cols()
        )));
    }
    if y.len() != x.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} rows but {} labels",
            x.rows(),
            y.len()
        )));
    }
    let l = model.outputs();
    check_labels(l, 1, y)?;
    let m = x.rows();
    let inv_m = 1.0 / m as f64;

    let mut coeffs = DenseMatrix::zeros(m, l);
    let mut scores = vec![0.0; l];
    let mut loss = 0.0;
    for i in 0..m {
        for c in 0..l {
            scores[c] = dot(model.weights.row(c), x.row(i)) + model.bias[c];
        }
        loss += row_loss_coeffs(model.family, &scores, y[i], coeffs.row_mut(i));
    }
    loss *= inv_m;

    let mut g_w = DenseMatrix::zeros(l, model.p());
    exec::for_each_row_mut(g_w.data_mut(), model.p(), |c, row| {
        for i in 0..m {
            axpy(row, coeffs[(i, c)], x.row(i));
        }
        for v in row.iter_mut() {
            *v *= inv_m;
        }
    });
    let mut g_b = vec![0.0; l];
    for c in 0..l {
        for i in 0..m {
            g_b[c] += coeffs[(i, c)];
        }
        g_b[c] *= inv_m;
    }
    Ok((loss, g_w, g_b))
}

/// Random diagonal masking matrix for feature dropout: each feature is kept
/// with probability `1 - delta` and scaled by `1/sqrt(1 - delta)`, so that
/// `E[phi^T phi] = I` and the diagonal noise has `E[Delta^2] = delta/(1-delta)`.
pub fn dropout_mask(p: usize, delta: f64, rng: &mut RngState) -> Result<SparseGrouping> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidArgument(format!(
            "dropout delta {delta} must be in [0, 1)"
        )));
    }
    let value = 1.0 / (1.0 - delta).sqrt();
    let keep: Vec<bool> = (0..p).map(|_| !rng.bernoulli(delta)).collect();
    Ok(SparseGrouping::from_mask(&keep, value))
}

/// Accuracy of argmax predictions; ties break to the lowest class index.
pub fn evaluate(model: &GlmModel, data: &Dataset) -> Result<f64> {
    if data.n() == 0 {
        return Err(Error::InvalidArgument(
            "cannot evaluate on empty data".into(),
        ));
    }
    check_labels(model.outputs(), data.classes(), data.labels())?;
    if data.p() != model.p() {
        return Err(Error::DimensionMismatch(format!(
            "model has p={}, data has p={}",
            model.p(),
            data.p()
        )));
    }
    let l = model.outputs();
    let hits: Vec<u8> = exec::map_indexed(data.n(), |i| {
        let x = data.sample(i);
        let predicted = if l == 1 {
            // Sigmoid binary: positive score means class 1; the tie at zero
            // (probability one half) goes to class 0.
            usize::from(dot(model.weights.row(0), x) + model.bias[0] > 0.0)
        } else {
            let mut best = 0;
            let mut best_score = dot(model.weights.row(0), x) + model.bias[0];
            for c in 1..l {
                let s = dot(model.weights.row(c), x) + model.bias[c];
                if s > best_score {
                    best = c;
                    best_score = s;
                }
            }
            best
        };
        u8::from(predicted == data.label(i) as usize)
    });
    Ok(hits.iter().map(|&h| h as usize).sum::<usize>() as f64 / data.n() as f64)
}

struct AdamState {
    m_w: Vec<f64>,
    v_w: Vec<f64>,
    m_b: Vec<f64>,
    v_b: Vec<f64>,
    t: u64,
}

/// Trains the model on `data`; per-epoch accuracy is measured on `eval_data`
/// when given (otherwise on the training data). Deterministic given the
/// config seed; wall-clock fields are the only non-reproducible output.
pub fn train(
    model: GlmModel,
    data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(GlmModel, Metrics)> {
    cfg.validate()?;
    let mut model = model;
    let l = model.outputs();
    let p = model.p();
    if data.p() != p {
        return Err(Error::DimensionMismatch(format!(
            "model has p={p}, data has p={}",
            data.p()
        )));
    }
    check_labels(l, data.classes(), data.labels())?;
    if let Regularizer::Grouping { bank, .. } = &cfg.regularizer {
        if bank.p() != p {
            return Err(Error::DimensionMismatch(format!(
                "bank has p={}, model has p={p}",
                bank.p()
            )));
        }
    }

    let n = data.n();
    let m_max = cfg.minibatch.min(n);
    let base = RngState::new(cfg.seed);
    // Independent streams: minibatch order must not depend on whether the
    // regularizer consumes randomness.
    let mut shuffle_rng = base.derive(1);
    let mut reg_rng = base.derive(2);

    let k_dim = match &cfg.regularizer {
        Regularizer::Grouping { bank, .. } => bank.k(),
        Regularizer::Dropout { .. } => p,
        _ => 0,
    };
    let mut scores = vec![0.0; m_max * l];
    let mut coeffs = vec![0.0; m_max * l];
    let mut xhat = vec![0.0; m_max * k_dim];
    let mut what = vec![0.0; l * k_dim];
    let mut ghat = vec![0.0; l * k_dim];
    let mut gfull = vec![0.0; l * p];
    let mut gbias = vec![0.0; l];
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { .. } => Some(AdamState {
            m_w: vec![0.0; l * p],
            v_w: vec![0.0; l * p],
            m_b: vec![0.0; l],
            v_b: vec![0.0; l],
            t: 0,
        }),
        Optimizer::Sgd => None,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Metrics::default();
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        shuffle_rng.shuffle(&mut order);
        let epoch_phi: Option<SparseGrouping> = match &cfg.regularizer {
            Regularizer::Grouping {
                bank,
                policy: BankPolicy::PerEpoch,
                ..
            } => Some(bank.draw(&mut reg_rng).clone()),
            _ => None,
        };
        let mut epoch_loss = 0.0;
        for batch in order.chunks(m_max) {
            let step_mask;
            let phi: Option<&SparseGrouping> = match &cfg.regularizer {
                Regularizer::None | Regularizer::L2 { .. } => None,
                Regularizer::Dropout { delta } => {
                    step_mask = dropout_mask(p, *delta, &mut reg_rng)?;
                    Some(&step_mask)
                }
                Regularizer::Grouping { bank, policy, .. } => match policy {
                    BankPolicy::PerMinibatch => Some(bank.draw(&mut reg_rng)),
                    BankPolicy::PerEpoch => epoch_phi.as_ref(),
                },
            };
            let lambda = match &cfg.regularizer {
                Regularizer::L2 { lambda } => *lambda,
                Regularizer::Grouping { lambda, .. } => *lambda,
                _ => 0.0,
            };

            let mb = batch.len();
            let inv_m = 1.0 / mb as f64;
            let d = phi.map_or(p, |f| f.k());

            if let Some(phi) = phi {
                // Reduced weights W_hat = W phi^T, one spgemv per row.
                exec::for_each_row_mut(&mut what[..l * d], d, |c, row| {
                    project_into(phi, model.weights.row(c), row);
                });
                // Projected inputs.
                exec::for_each_row_mut(&mut xhat[..mb * d], d, |bi, row| {
                    project_into(phi, data.sample(batch[bi]), row);
                });
            }
            let w_eff: &[f64] = if phi.is_some() {
                &what[..l * d]
            } else {
                model.weights.data()
            };
            let x_at = |bi: usize| -> &[f64] {
                if phi.is_some() {
                    &xhat[bi * d..(bi + 1) * d]
                } else {
                    data.sample(batch[bi])
                }
            };

            // Scores for the batch (training-time prediction uses the
            // projected weights when grouping is active).
            exec::for_each_row_mut(&mut scores[..mb * l], l, |bi, row| {
                let x = x_at(bi);
                for c in 0..l {
                    row[c] = dot(&w_eff[c * d..(c + 1) * d], x) + model.bias[c];
                }
            });

            let mut batch_loss = 0.0;
            for bi in 0..mb {
                batch_loss += row_loss_coeffs(
                    model.family,
                    &scores[bi * l..(bi + 1) * l],
                    data.label(batch[bi]),
                    &mut coeffs[bi * l..(bi + 1) * l],
                );
            }
            batch_loss *= inv_m;
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss at epoch {epoch}; lower the learning rate"
                )));
            }
            epoch_loss += batch_loss * mb as f64;

            // Gradient in the effective space, one parallel task per output
            // row; the inner accumulation over the batch keeps a fixed order.
            let g_eff: &mut [f64] = if phi.is_some() {
                &mut ghat[..l * d]
            } else {
                &mut gfull[..l * p]
            };
            {
                let coeffs = &coeffs;
                exec::for_each_row_mut(g_eff, d, |c, row| {
                    row.fill(0.0);
                    for bi in 0..mb {
                        axpy(row, coeffs[bi * l + c], x_at(bi));
                    }
                    for v in row.iter_mut() {
                        *v *= inv_m;
                    }
                });
            }
            for c in 0..l {
                let mut acc = 0.0;
                for bi in 0..mb {
                    acc += coeffs[bi * l + c];
                }
                gbias[c] = acc * inv_m;
            }

            if let Some(phi) = phi {
                let ghat_ref = &ghat[..l * d];
                exec::for_each_row_mut(&mut gfull, p, |c, row| {
                    backproject_into(phi, &ghat_ref[c * d..(c + 1) * d], row);
                });
            }
            if lambda > 0.0 {
                for c in 0..l {
                    axpy(&mut gfull[c * p..(c + 1) * p], lambda, model.weights.row(c));
                }
            }

            apply_update(
                &mut model,
                &gfull,
                &gbias,
                cfg.learning_rate,
                cfg.optimizer,
                adam.as_mut(),
            );
        }

        if !model.weights.is_finite() || !model.bias.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite parameters after epoch {epoch}; lower the learning rate"
            )));
        }
        let test_acc =
            if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
                evaluate(&model, eval_data.unwrap_or(data))?
            } else {
                f64::NAN
            };
        metrics.epochs.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / n as f64,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok((model, metrics))
}

fn project_into(phi: &SparseGrouping, x: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    for j in 0..phi.p() {
        if let Some(r) = phi.row_of(j) {
            out[r] += phi.value_of(j) * x[j];
        }
    }
}

fn backproject_into(phi: &SparseGrouping, z: &[f64], out: &mut [f64]) {
    for j in 0..phi.p() {
        out[j] = match phi.row_of(j) {
            Some(r) => phi.value_of(j) * z[r],
            None => 0.0,
        };
    }
}

fn apply_update(
    model: &mut GlmModel,
    g_w: &[f64],
    g_b: &[f64],
    lr: f64,
    optimizer: Optimizer,
    adam: Option<&mut AdamState>,
) {
    match optimizer {
        Optimizer::Sgd => {
            for (w, g) in model.weights.data_mut().iter_mut().zip(g_w) {
                *w -= lr * *g;
            }
            for (b, g) in model.bias.iter_mut().zip(g_b) {
                *b -= lr * *g;
            }
        }
        Optimizer::Adam {
            beta1,
            beta2,
            epsilon,
        } => {
            let st = adam.expect("adam state allocated with adam optimizer");
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            for (((w, g), m), v) in model
                .weights
                .data_mut()
                .iter_mut()
                .zip(g_w)
                .zip(st.m_w.iter_mut())
                .zip(st.v_w.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * *g;
                *v = beta2 * *v + (1.0 - beta2) * *g * *g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
            }
            for (((b, g), m), v) in model
                .bias
                .iter_mut()
                .zip(g_b)
                .zip(st.m_b.iter_mut())
                .zip(st.v_b.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * *g;
                *v = beta2 * *v + (1.0 - beta2) * *g * *g;
                *b -= lr * (*m / bc1) / ((*v / bc2).sqrt() + epsilon);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::{partition_to_phi, Partition};
    use crate::linalg::spgemv;

    fn random_problem(
        seed: u64,
        m: usize,
        p: usize,
        l: usize,
        family: GlmFamily,
    ) -> (GlmModel, DenseMatrix, Vec<u32>) {
        let mut rng = RngState::new(seed);
        let mut w = DenseMatrix::zeros(l, p);
        for v in w.data_mut() {
            *v = 0.3 * rng.normal();
        }
        let bias: Vec<f64> = (0..l).map(|_| 0.1 * rng.normal()).collect();
        let model = GlmModel::new(w, bias, family).unwrap();
        let mut x = DenseMatrix::zeros(m, p);
        for v in x.data_mut() {
            *v = rng.normal();
        }
        let limit = if l == 1 { 2 } else { l };
        let y: Vec<u32> = (0..m).map(|_| rng.index(limit) as u32).collect();
        (model, x, y)
    }

    #[test]
    fn forward_is_uniform_at_zero() {
        let model = GlmModel::zeros(2, 3, GlmFamily::Logistic);
        let x = DenseMatrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 0.0, 1.0, 2.0]).unwrap();
        let probs = forward(&model, &x).unwrap();
        for v in probs.data() {
            assert_eq!(*v, 0.5);
        }
        let model = GlmModel::zeros(20, 3, GlmFamily::Logistic);
        let probs = forward(&model, &x).unwrap();
        for v in probs.data() {
            assert!((v - 0.05).abs() <= 1e-15);
        }
    }

    #[test]
    fn forward_matches_naive_softmax() {
        let (model, x, _) = random_problem(5, 7, 6, 4, GlmFamily::Logistic);
        let probs = forward(&model, &x).unwrap();
        for i in 0..7 {
            // Naive oracle: direct exp / normalize.
            let z: Vec<f64> = (0..4)
                .map(|c| {
                    (0..6)
                        .map(|j| model.weights()[(c, j)] * x[(i, j)])
                        .sum::<f64>()
                        + model.bias()[c]
                })
                .collect();
            let total: f64 = z.iter().map(|v| v.exp()).sum();
            let mut row_sum = 0.0;
            for c in 0..4 {
                let oracle = z[c].exp() / total;
                assert!((probs[(i, c)] - oracle).abs() <= 1e-12);
                row_sum += probs[(i, c)];
            }
            assert!((row_sum - 1.0).abs() <= 1e-12);
        }
    }

    /// Central finite differences at step 1e-5.
    fn finite_diff_check(model: &GlmModel, x: &DenseMatrix, y: &[u32]) {
        let (_, g_w, g_b) = loss_grad(model, x, y).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for c in 0..model.outputs() {
            for j in 0..model.p() {
                let mut up = model.clone();
                up.weights[(c, j)] += h;
                let mut down = model.clone();
                down.weights[(c, j)] -= h;
                let (lu, _, _) = loss_grad(&up, x, y).unwrap();
                let (ld, _, _) = loss_grad(&down, x, y).unwrap();
                let fd = (lu - ld) / (2.0 * h);
                let denom = fd.abs().max(g_w[(c, j)].abs()).max(1e-8);
                worst = worst.max((fd - g_w[(c, j)]).abs() / denom);
            }
            let mut up = model.clone();
            up.bias[c] += h;
            let mut down = model.clone();
            down.bias[c] -= h;
            let (lu, _, _) = loss_grad(&up, x, y).unwrap();
            let (ld, _, _) = loss_grad(&down, x, y).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            let denom = fd.abs().max(g_b[c].abs()).max(1e-8);
            worst = worst.max((fd - g_b[c]).abs() / denom);
        }
        assert!(worst <= 1e-5, "finite-difference relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let (model, x, y) = random_problem(seed, 4, 6, 3, GlmFamily::Logistic);
            finite_diff_check(&model, &x, &y);
            let (model, x, y) = random_problem(seed + 50, 4, 6, 3, GlmFamily::Gaussian);
            finite_diff_check(&model, &x, &y);
            let (model, x, y) = random_problem(seed + 100, 4, 6, 1, GlmFamily::Logistic);
            finite_diff_check(&model, &x, &y);
        }
    }

    #[test]
    fn zero_model_balanced_batch_has_zero_bias_gradient() {
        let model = GlmModel::zeros(2, 3, GlmFamily::Logistic);
        let x = DenseMatrix::from_vec(4, 3, vec![1.0; 12]).unwrap();
        let y = vec![0, 1, 0, 1];
        let (_, _, g_b) = loss_grad(&model, &x, &y).unwrap();
        assert_eq!(g_b, vec![0.0, 0.0]);
    }

    #[test]
    fn duplicated_batch_equals_single_sample_gradient() {
        let (model, x, y) = random_problem(9, 1, 5, 3, GlmFamily::Logistic);
        let (loss1, g1, b1) = loss_grad(&model, &x, &y).unwrap();
        let mut x4 = DenseMatrix::zeros(4, 5);
        for i in 0..4 {
            x4.row_mut(i).copy_from_slice(x.row(0));
        }
        let y4 = vec![y[0]; 4];
        let (loss4, g4, b4) = loss_grad(&model, &x4, &y4).unwrap();
        assert!((loss1 - loss4).abs() <= 1e-15);
        assert!(g1.max_abs_diff(&g4) <= 1e-15);
        for (a, b) in b1.iter().zip(&b4) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let model = GlmModel::zeros(3, 2, GlmFamily::Logistic);
        let x = DenseMatrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(loss_grad(&model, &x, &[5]).is_err());
    }

    fn toy_dataset(seed: u64) -> Dataset {
        // Linearly separable two-class problem in the plane.
        let mut rng = RngState::new(seed);
        let n = 40;
        let mut x = DenseMatrix::zeros(n, 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let class = (i % 2) as u32;
            let offset = if class == 0 { -2.0 } else { 2.0 };
            x[(i, 0)] = offset + 0.5 * rng.normal();
            x[(i, 1)] = offset + 0.5 * rng.normal();
            y.push(class);
        }
        Dataset::new(x, y, 2, vec![]).unwrap()
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = toy_dataset(3);
        let mut cfg = TrainConfig::new(0);
        cfg.epochs = 200;
        cfg.minibatch = 8;
        cfg.learning_rate = 0.5;
        cfg.optimizer = Optimizer::Sgd;
        let model = GlmModel::zeros(2, 2, GlmFamily::Logistic);
        let (model, metrics) = train(model, &data, None, &cfg).unwrap();
        assert_eq!(evaluate(&model, &data).unwrap(), 1.0);
        assert!(metrics.final_loss() < metrics.epochs[0].train_loss);
    }

    #[test]
    fn manual_step_matches_hand_computation() {
        // Single sample, W = 0, one SGD step with grouping over {{0,1},{2}}.
        let part = Partition::new(2, vec![0, 0, 1]).unwrap();
        let phi = partition_to_phi(&part);
        let bank = Arc::new(ProjectionBank::from_matrices(vec![phi.clone()], 1, 0).unwrap());
        let x = DenseMatrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let data = Dataset::new(x.clone(), vec![1], 2, vec![]).unwrap();
        let mut cfg = TrainConfig::new(0);
        cfg.epochs = 1;
        cfg.minibatch = 1;
        cfg.learning_rate = 0.1;
        cfg.optimizer = Optimizer::Sgd;
        cfg.regularizer = Regularizer::Grouping {
            bank,
            policy: BankPolicy::PerMinibatch,
            lambda: 0.0,
        };
        let model = GlmModel::zeros(2, 3, GlmFamily::Logistic);
        let (model, _) = train(model, &data, None, &cfg).unwrap();

        // Hand/dense oracle: scores are zero, so probs = 1/2 and
        // coeff = probs - onehot(1). g_hat = coeff * (phi x)^T; the update is
        // -eps * g_hat * phi per row.
        let xhat = spgemv(&phi, x.row(0)).unwrap();
        let coeff = [0.5, -0.5];
        for c in 0..2 {
            for j in 0..3 {
                let g_hat_q = coeff[c] * xhat[phi.row_of(j).unwrap()];
                let expected = -0.1 * g_hat_q * phi.value_of(j);
                assert!(
                    (model.weights()[(c, j)] - expected).abs() <= 1e-15,
                    "W[{c},{j}] = {}, expected {expected}",
                    model.weights()[(c, j)]
                );
            }
            assert!((model.bias()[c] - (-0.1 * coeff[c])).abs() <= 1e-15);
        }
    }

    fn bits_of(model: &GlmModel) -> Vec<u64> {
        model
            .weights()
            .data()
            .iter()
            .chain(model.bias())
            .map(|v| v.to_bits())
            .collect()
    }

    #[test]
    fn identity_bank_collapses_to_unregularized() {
        let data = toy_dataset(11);
        for optimizer in [Optimizer::Sgd, Optimizer::adam()] {
            let mut plain_cfg = TrainConfig::new(7);
            plain_cfg.epochs = 5;
            plain_cfg.minibatch = 7; // uneven final batch on purpose
            plain_cfg.learning_rate = 0.05;
            plain_cfg.optimizer = optimizer;
            let (plain, _) = train(
                GlmModel::zeros(2, 2, GlmFamily::Logistic),
                &data,
                None,
                &plain_cfg,
            )
            .unwrap();

            let identity_bank = Arc::new(
                ProjectionBank::from_matrices(vec![SparseGrouping::identity(2)], 1, 0).unwrap(),
            );
            for policy in [BankPolicy::PerMinibatch, BankPolicy::PerEpoch] {
                let mut cfg = plain_cfg.clone();
                cfg.regularizer = Regularizer::Grouping {
                    bank: identity_bank.clone(),
                    policy,
                    lambda: 0.0,
                };
                let (grouped, _) = train(
                    GlmModel::zeros(2, 2, GlmFamily::Logistic),
                    &data,
                    None,
                    &cfg,
                )
                .unwrap();
                assert_eq!(bits_of(&plain), bits_of(&grouped));
            }
        }
    }

    #[test]
    fn zero_dropout_collapses_to_unregularized() {
        let data = toy_dataset(13);
        let mut plain_cfg = TrainConfig::new(3);
        plain_cfg.epochs = 4;
        plain_cfg.minibatch = 8;
        plain_cfg.learning_rate = 0.05;
        let (plain, _) = train(
            GlmModel::zeros(2, 2, GlmFamily::Logistic),
            &data,
            None,
            &plain_cfg,
        )
        .unwrap();

        let mut cfg = plain_cfg.clone();
        cfg.regularizer = Regularizer::Dropout { delta: 0.0 };
        let (dropped, _) = train(
            GlmModel::zeros(2, 2, GlmFamily::Logistic),
            &data,
            None,
            &cfg,
        )
        .unwrap();
        assert_eq!(bits_of(&plain), bits_of(&dropped));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = toy_dataset(17);
        let mut cfg = TrainConfig::new(5);
        cfg.epochs = 3;
        cfg.regularizer = Regularizer::Dropout { delta: 0.3 };
        let (a, _) = train(
            GlmModel::zeros(2, 2, GlmFamily::Logistic),
            &data,
            None,
            &cfg,
        )
        .unwrap();
        let (b, _) = train(
            GlmModel::zeros(2, 2, GlmFamily::Logistic),
            &data,
            None,
            &cfg,
        )
        .unwrap();
        assert_eq!(bits_of(&a), bits_of(&b));
        cfg.seed = 6;
        let (c, _) = train(
            GlmModel::zeros(2, 2, GlmFamily::Logistic),
            &data,
            None,
            &cfg,
        )
        .unwrap();
        assert_ne!(bits_of(&a), bits_of(&c));
    }

    #[test]
    fn dropout_mask_properties() {
        let mut rng = RngState::new(2);
        let eye = dropout_mask(6, 0.0, &mut rng).unwrap();
        assert_eq!(eye.to_dense(), DenseMatrix::identity(6));

        let half = dropout_mask(400, 0.5, &mut rng).unwrap();
        let root2 = 2f64.sqrt();
        for j in 0..400 {
            if half.row_of(j).is_some() {
                assert!((half.value_of(j) - root2).abs() <= 1e-15);
            }
        }

        assert!(dropout_mask(4, 1.0, &mut rng).is_err());
        assert!(dropout_mask(4, -0.1, &mut rng).is_err());

        // Monte Carlo drop fraction.
        let mut dropped = 0usize;
        let trials = 100_000;
        let p = 100;
        for _ in 0..trials / p {
            let mask = dropout_mask(p, 0.3, &mut rng).unwrap();
            dropped += (0..p).filter(|&j| mask.row_of(j).is_none()).count();
        }
        let frac = dropped as f64 / trials as f64;
        assert!((frac - 0.3).abs() <= 0.005 * 3.0, "drop fraction {frac}");
    }

    #[test]
    fn dropout_mask_second_moment() {
        // delta = 0.5: kept diagonal of phi^T phi is 2, so E[diag] = 1 and
        // Var[diag] = 1 = delta / (1 - delta).
        let mut rng = RngState::new(8);
        let trials = 20_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let mask = dropout_mask(1, 0.5, &mut rng).unwrap();
            let diag = match mask.row_of(0) {
                Some(_) => mask.value_of(0) * mask.value_of(0),
                None => 0.0,
            };
            sum += diag;
            sum_sq += diag * diag;
        }
        let mean = sum / trials as f64;
        let var = sum_sq / trials as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.05);
        assert!((var - 1.0).abs() < 0.1);
    }

    #[test]
    fn evaluate_edge_cases() {
        // Constant model over 20 balanced classes predicts class 0.
        let classes = 20;
        let per = 3;
        let mut x = DenseMatrix::zeros(classes * per, 4);
        let mut rng = RngState::new(1);
        for v in x.data_mut() {
            *v = rng.normal();
        }
        let y: Vec<u32> = (0..classes * per).map(|i| (i / per) as u32).collect();
        let data = Dataset::new(x, y, classes, vec![]).unwrap();
        let model = GlmModel::zeros(classes, 4, GlmFamily::Logistic);
        let acc = evaluate(&model, &data).unwrap();
        assert!((acc - 1.0 / classes as f64).abs() <= 1e-12);

        // Zero binary model on a class-0-only set: tie at z = 0 breaks to 0.
        let x = DenseMatrix::from_vec(3, 2, vec![1.0, -1.0, 0.5, 2.0, -0.25, 0.0]).unwrap();
        let zeros_only = Dataset::new(x, vec![0, 0, 0], 2, vec![]).unwrap();
        let binary = GlmModel::zeros(1, 2, GlmFamily::Logistic);
        assert_eq!(evaluate(&binary, &zeros_only).unwrap(), 1.0);
    }

    #[test]
    fn divergent_training_aborts() {
        let data = toy_dataset(19);
        let mut cfg = TrainConfig::new(0);
        cfg.epochs = 60;
        cfg.learning_rate = 1e12;
        cfg.optimizer = Optimizer::Sgd;
        let model = GlmModel::zeros(2, 2, GlmFamily::Gaussian);
        let err = train(model, &data, None, &cfg);
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn model_roundtrips_through_fgw1() {
        let (model, _, _) = random_problem(33, 1, 5, 3, GlmFamily::Logistic);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        model.save(&path).unwrap();
        let back = GlmModel::load(&path, GlmFamily::Logistic).unwrap();
        assert_eq!(model, back);
        // Header sanity: magic.
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"FGW1");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 8 * (3 * 5 + 3));
    }
}
