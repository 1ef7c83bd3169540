//! Flat-parameter models and their loss/gradient kernels.
//!
//! All model families store parameters as a single `Vec<f64>` so that
//! federated averaging, SGD, and distance computations are plain elementwise
//! loops. Layouts:
//!
//! * softmax-linear: `[W (classes x input, row-major), b (classes)]`
//! * mlp-1hidden:    `[W1 (hidden x input), b1 (hidden), W2 (classes x hidden), b2 (classes)]`
//! * linear-regression: `[w (input)]`, no bias

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Parameters are initialized uniformly in `[-INIT_RANGE, INIT_RANGE]`.
pub const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    SoftmaxLinear,
    Mlp1Hidden,
    LinearRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub input_dim: usize,
    /// Output classes for classifiers; 1 for linear regression.
    pub num_classes: usize,
    /// Hidden width for mlp-1hidden; 0 otherwise.
    #[serde(default)]
    pub hidden_dim: usize,
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec { family: ModelFamily::SoftmaxLinear, input_dim, num_classes, hidden_dim: 0 }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelSpec { family: ModelFamily::Mlp1Hidden, input_dim, num_classes, hidden_dim }
    }

    pub fn linear_regression(input_dim: usize) -> Self {
        ModelSpec { family: ModelFamily::LinearRegression, input_dim, num_classes: 1, hidden_dim: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::input("model input_dim must be at least 1"));
        }
        match self.family {
            ModelFamily::SoftmaxLinear | ModelFamily::Mlp1Hidden => {
                if self.num_classes < 2 {
                    return Err(Error::input("classifier needs at least 2 classes"));
                }
                if self.family == ModelFamily::Mlp1Hidden && self.hidden_dim == 0 {
                    return Err(Error::input("mlp-1hidden needs hidden_dim >= 1"));
                }
            }
            ModelFamily::LinearRegression => {
                if self.num_classes != 1 {
                    return Err(Error::input("linear-regression has exactly one output"));
                }
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        match self.family {
            ModelFamily::SoftmaxLinear => self.num_classes * (self.input_dim + 1),
            ModelFamily::Mlp1Hidden => {
                self.hidden_dim * (self.input_dim + 1) + self.num_classes * (self.hidden_dim + 1)
            }
            ModelFamily::LinearRegression => self.input_dim,
        }
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.family, ModelFamily::SoftmaxLinear | ModelFamily::Mlp1Hidden)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::input("ragged rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Labels for a batch: class indices or regression targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Targets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Labels,
}

impl Batch {
    pub fn classification(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        Self::checked(features, Labels::Classes(labels))
    }

    pub fn regression(features: Matrix, targets: Vec<f64>) -> Result<Self> {
        Self::checked(features, Labels::Targets(targets))
    }

    fn checked(features: Matrix, labels: Labels) -> Result<Self> {
        if features.rows == 0 {
            return Err(Error::input("batch must contain at least one sample"));
        }
        if features.rows != labels.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                features.rows,
                labels.len()
            )));
        }
        if features.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite feature value"));
        }
        if let Labels::Targets(t) = &labels {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite regression target"));
            }
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the given rows into a new batch. Indices must be in range.
    pub fn select(&self, rows: &[usize]) -> Batch {
        let cols = self.features.cols;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(self.features.row(r));
        }
        let labels = match &self.labels {
            Labels::Classes(v) => Labels::Classes(rows.iter().map(|&r| v[r]).collect()),
            Labels::Targets(v) => Labels::Targets(rows.iter().map(|&r| v[r]).collect()),
        };
        Batch { features: Matrix { rows: rows.len(), cols, data }, labels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
}

impl Model {
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Model { params: vec![0.0; spec.param_count()], spec })
    }

    /// Fresh model with parameters drawn uniformly from the given stream.
    pub fn init<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params =
            (0..spec.param_count()).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        Ok(Model { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite model parameter"));
        }
        Ok(Model { spec, params })
    }
}

fn check_features(spec: &ModelSpec, features: &Matrix) -> Result<()> {
    if features.cols != spec.input_dim {
        return Err(Error::input(format!(
            "feature dim {} does not match model input_dim {}",
            features.cols, spec.input_dim
        )));
    }
    Ok(())
}

fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Class logits for one input row.
fn logits(model: &Model, x: &[f64]) -> Vec<f64> {
    let spec = &model.spec;
    let d = spec.input_dim;
    match spec.family {
        ModelFamily::SoftmaxLinear => {
            let nc = spec.num_classes;
            let (w, b) = model.params.split_at(nc * d);
            (0..nc)
                .map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
                .collect()
        }
        ModelFamily::Mlp1Hidden => {
            let h = hidden_activations(model, x);
            output_logits(model, &h)
        }
        ModelFamily::LinearRegression => unreachable!("logits on a regression model"),
    }
}

fn hidden_activations(model: &Model, x: &[f64]) -> Vec<f64> {
    let d = model.spec.input_dim;
    let hd = model.spec.hidden_dim;
    let w1 = &model.params[..hd * d];
    let b1 = &model.params[hd * d..hd * (d + 1)];
    (0..hd)
        .map(|j| {
            (b1[j] + w1[j * d..(j + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>())
                .tanh()
        })
        .collect()
}

fn output_logits(model: &Model, hidden: &[f64]) -> Vec<f64> {
    let d = model.spec.input_dim;
    let hd = model.spec.hidden_dim;
    let nc = model.spec.num_classes;
    let off = hd * (d + 1);
    let w2 = &model.params[off..off + nc * hd];
    let b2 = &model.params[off + nc * hd..];
    (0..nc)
        .map(|c| {
            b2[c] + w2[c * hd..(c + 1) * hd].iter().zip(hidden).map(|(wi, hi)| wi * hi).sum::<f64>()
        })
        .collect()
}

/// Per-class probabilities, one row per input row. Classifiers only.
pub fn predict_proba(model: &Model, features: &Matrix) -> Result<Matrix> {
    if !model.spec.is_classifier() {
        return Err(Error::unsupported("predict_proba requires a classifier"));
    }
    check_features(&model.spec, features)?;
    let nc = model.spec.num_classes;
    let mut out = Vec::with_capacity(features.rows * nc);
    for i in 0..features.rows {
        let mut l = logits(model, features.row(i));
        softmax_in_place(&mut l);
        out.extend_from_slice(&l);
    }
    Ok(Matrix { rows: features.rows, cols: nc, data: out })
}

/// Argmax prediction per row; ties resolve to the lowest class index.
pub fn predict_labels(model: &Model, features: &Matrix) -> Result<Vec<usize>> {
    let probs = predict_proba(model, features)?;
    Ok((0..probs.rows).map(|i| argmax(probs.row(i))).collect())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_labels(model: &Model, batch: &Batch) -> Result<()> {
    match (&batch.labels, model.spec.is_classifier()) {
        (Labels::Classes(ls), true) => {
            if let Some(&bad) = ls.iter().find(|&&l| l >= model.spec.num_classes) {
                return Err(Error::input(format!(
                    "label {} out of range for {} classes",
                    bad, model.spec.num_classes
                )));
            }
            Ok(())
        }
        (Labels::Targets(_), false) => Ok(()),
        (Labels::Classes(_), false) => {
            Err(Error::input("class labels passed to a regression model"))
        }
        (Labels::Targets(_), true) => {
            Err(Error::input("regression targets passed to a classifier"))
        }
    }
}

/// Mean loss over the batch: cross-entropy for classifiers (log inputs
/// clamped at [`LOG_CLAMP`]), squared error `0.5 * (y - w.x)^2` for
/// regression.
pub fn batch_loss(model: &Model, batch: &Batch) -> Result<f64> {
    check_labels(model, batch)?;
    check_features(&model.spec, &batch.features)?;
    let n = batch.len() as f64;
    match &batch.labels {
        Labels::Classes(ls) => {
            let probs = predict_proba(model, &batch.features)?;
            let mut total = 0.0;
            for (i, &y) in ls.iter().enumerate() {
                total -= probs.row(i)[y].max(LOG_CLAMP).ln();
            }
            Ok(total / n)
        }
        Labels::Targets(ts) => {
            let mut total = 0.0;
            for (i, &y) in ts.iter().enumerate() {
                let pred: f64 =
                    model.params.iter().zip(batch.features.row(i)).map(|(w, x)| w * x).sum();
                let r = y - pred;
                total += 0.5 * r * r;
            }
            Ok(total / n)
        }
    }
}

/// Gradient of [`batch_loss`] with respect to the flat parameter vector.
pub fn batch_gradient(model: &Model, batch: &Batch) -> Result<Vec<f64>> {
    check_labels(model, batch)?;
    check_features(&model.spec, &batch.features)?;
    let n = batch.len() as f64;
    let d = model.spec.input_dim;
    let mut grad = vec![0.0; model.spec.param_count()];
    match (&batch.labels, model.spec.family) {
        (Labels::Classes(ls), ModelFamily::SoftmaxLinear) => {
            let nc = model.spec.num_classes;
            for (i, &y) in ls.iter().enumerate() {
                let x = batch.features.row(i);
                let mut p = logits(model, x);
                softmax_in_place(&mut p);
                p[y] -= 1.0;
                for c in 0..nc {
                    let row = &mut grad[c * d..(c + 1) * d];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += p[c] * xi;
                    }
                    grad[nc * d + c] += p[c];
                }
            }
        }
        (Labels::Classes(ls), ModelFamily::Mlp1Hidden) => {
            let nc = model.spec.num_classes;
            let hd = model.spec.hidden_dim;
            let off = hd * (d + 1);
            for (i, &y) in ls.iter().enumerate() {
                let x = batch.features.row(i);
                let h = hidden_activations(model, x);
                let mut delta2 = output_logits(model, &h);
                softmax_in_place(&mut delta2);
                delta2[y] -= 1.0;
                let w2 = &model.params[off..off + nc * hd];
                for c in 0..nc {
                    for (j, hj) in h.iter().enumerate() {
                        grad[off + c * hd + j] += delta2[c] * hj;
                    }
                    grad[off + nc * hd + c] += delta2[c];
                }
                for (j, hj) in h.iter().enumerate() {
                    let back: f64 = (0..nc).map(|c| w2[c * hd + j] * delta2[c]).sum();
                    let delta1 = back * (1.0 - hj * hj);
                    for (k, xk) in x.iter().enumerate() {
                        grad[j * d + k] += delta1 * xk;
                    }
                    grad[hd * d + j] += delta1;
                }
            }
        }
        (Labels::Targets(ts), ModelFamily::LinearRegression) => {
            for (i, &y) in ts.iter().enumerate() {
                let x = batch.features.row(i);
                let pred: f64 = model.params.iter().zip(x).map(|(w, xi)| w * xi).sum();
                let r = pred - y;
                for (g, xi) in grad.iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
        }
        _ => unreachable!("label kind checked above"),
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok(grad)
}

/// One gradient-descent step; returns the updated model.
pub fn sgd_step(model: &Model, gradient: &[f64], learning_rate: f64) -> Result<Model> {
    if gradient.len() != model.params.len() {
        return Err(Error::input(format!(
            "gradient length {} does not match {} parameters",
            gradient.len(),
            model.params.len()
        )));
    }
    if !learning_rate.is_finite() || learning_rate <= 0.0 {
        return Err(Error::input("learning rate must be positive and finite"));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient component"));
    }
    let params = model
        .params
        .iter()
        .zip(gradient)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    Ok(Model { spec: model.spec, params })
}

/// Fraction of rows whose argmax prediction matches the label.
pub fn accuracy(model: &Model, batch: &Batch) -> Result<f64> {
    let labels = match &batch.labels {
        Labels::Classes(ls) => ls,
        Labels::Targets(_) => return Err(Error::input("accuracy requires class labels")),
    };
    let preds = predict_labels(model, &batch.features)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Euclidean distance between two parameter vectors of equal length.
pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
