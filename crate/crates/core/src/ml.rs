//! Plaintext training: multinomial logistic regression and multilayer
//! perceptrons trained with mini-batch SGD.
//!
//! Parameters live in one flat vector so the protocol layer can encrypt them
//! element by element. Layout, for each layer from input to output: the
//! `fan_in x fan_out` weight matrix in row-major order, then `fan_out` biases.
//!
//! Output heads:
//! * two classes use a single sigmoid unit (binary logistic regression);
//! * more classes use softmax with categorical cross-entropy;
//! * `sigmoid_output` swaps softmax for independent per-class sigmoids with the
//!   mean per-class binary cross-entropy.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::linalg::Matrix;
use crate::wire::{ByteReader, ByteWriter, WireError};

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MlError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("malformed parameter file: {0}")]
    Format(#[from] WireError),
}

pub type Result<T> = std::result::Result<T, MlError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Relu,
    LeakyRelu,
    Tanh,
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn relu(t: f64) -> f64 {
    t.max(0.0)
}

pub fn leaky_relu(t: f64, beta: f64) -> f64 {
    if t > 0.0 {
        t
    } else {
        beta * t
    }
}

pub fn tanh(t: f64) -> f64 {
    t.tanh()
}

impl Activation {
    pub fn apply(self, t: f64, beta: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(t),
            Activation::Relu => relu(t),
            Activation::LeakyRelu => leaky_relu(t, beta),
            Activation::Tanh => tanh(t),
        }
    }

    /// Derivative at pre-activation `t`.
    pub fn derivative(self, t: f64, beta: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if t > 0.0 {
                    1.0
                } else {
                    beta
                }
            }
            Activation::Tanh => {
                let th = t.tanh();
                1.0 - th * th
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub width: usize,
    pub activation: Activation,
}

fn default_leaky_slope() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_layers: Vec<HiddenLayer>,
    pub num_classes: usize,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    /// Independent sigmoid outputs instead of softmax (more than two classes only).
    #[serde(
        default,
        rename = "paper_faithful_sigmoid_output",
        alias = "sigmoid_output"
    )]
    pub sigmoid_output: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OutputHead {
    BinarySigmoid,
    Softmax,
    IndependentSigmoid,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            hidden_layers: Vec::new(),
            num_classes,
            leaky_slope: default_leaky_slope(),
            sigmoid_output: false,
        }
    }

    pub fn mlp(input_dim: usize, hidden: &[(usize, Activation)], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden_layers: hidden
                .iter()
                .map(|&(width, activation)| HiddenLayer { width, activation })
                .collect(),
            num_classes,
            leaky_slope: default_leaky_slope(),
            sigmoid_output: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MlError::InvalidSpec(m.to_string()));
        if self.input_dim == 0 {
            return bad("input_dim must be positive");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        match self.kind {
            ModelKind::Logistic if !self.hidden_layers.is_empty() => {
                return bad("logistic regression has no hidden layers")
            }
            ModelKind::Mlp if self.hidden_layers.is_empty() => {
                return bad("an MLP needs at least one hidden layer")
            }
            _ => {}
        }
        if self.hidden_layers.iter().any(|h| h.width == 0) {
            return bad("hidden layer width must be positive");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in (0, 1)");
        }
        Ok(())
    }

    fn head(&self) -> OutputHead {
        if self.num_classes == 2 {
            OutputHead::BinarySigmoid
        } else if self.sigmoid_output {
            OutputHead::IndependentSigmoid
        } else {
            OutputHead::Softmax
        }
    }

    fn output_units(&self) -> usize {
        match self.head() {
            OutputHead::BinarySigmoid => 1,
            _ => self.num_classes,
        }
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut prev = self.input_dim;
        for h in &self.hidden_layers {
            dims.push((prev, h.width));
            prev = h.width;
        }
        dims.push((prev, self.output_units()));
        dims
    }

    /// Total parameter count `F`.
    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    fn activation(&self, layer: usize) -> Option<Activation> {
        self.hidden_layers.get(layer).map(|h| h.activation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    flat: Vec<f64>,
    layers: Vec<(usize, usize)>,
}

/// Borrowed view of one layer inside a flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl ModelParams {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ModelParams {
            flat: vec![0.0; spec.param_count()],
            layers: spec.layer_dims(),
        }
    }

    /// Uniform `[-r, r]` weights with `r = sqrt(6 / (fan_in + fan_out))`; zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Self {
        let layers = spec.layer_dims();
        let mut flat = Vec::with_capacity(spec.param_count());
        for &(fan_in, fan_out) in &layers {
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            flat.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-r..=r)));
            flat.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ModelParams { flat, layers }
    }

    pub fn from_flat(spec: &ModelSpec, flat: Vec<f64>) -> Result<Self> {
        let expected = spec.param_count();
        if flat.len() != expected {
            return Err(MlError::Dimension(format!(
                "expected {expected} parameters, got {}",
                flat.len()
            )));
        }
        Ok(ModelParams {
            flat,
            layers: spec.layer_dims(),
        })
    }

    /// Reassembles a flat vector from per-layer `(weights, bias)` pairs.
    pub fn from_layers(spec: &ModelSpec, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let dims = spec.layer_dims();
        if layers.len() != dims.len() {
            return Err(MlError::Dimension(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        let mut flat = Vec::with_capacity(spec.param_count());
        for ((w, b), &(i, o)) in layers.iter().zip(&dims) {
            if w.len() != i * o || b.len() != o {
                return Err(MlError::Dimension(format!(
                    "layer {i}x{o} got {} weights and {} biases",
                    w.len(),
                    b.len()
                )));
            }
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        Ok(ModelParams { flat, layers: dims })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.layers
    }

    pub fn layers(&self) -> Vec<LayerView<'_>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &self.layers {
            let w_end = offset + fan_in * fan_out;
            out.push(LayerView {
                fan_in,
                fan_out,
                weights: &self.flat[offset..w_end],
                bias: &self.flat[w_end..w_end + fan_out],
            });
            offset = w_end + fan_out;
        }
        out
    }

    /// Debug dump: `u64` count followed by big-endian IEEE-754 doubles.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u64(self.flat.len() as u64);
        for &v in &self.flat {
            w.f64(v);
        }
        w.into_inner()
    }

    pub fn from_bytes(spec: &ModelSpec, bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let n = r.u64()? as usize;
        if n.checked_mul(8) != Some(r.remaining()) {
            return Err(MlError::Format(WireError::Invalid(format!(
                "header says {n} values, {} bytes follow",
                r.remaining()
            ))));
        }
        let flat = (0..n)
            .map(|_| r.f64())
            .collect::<std::result::Result<_, _>>()?;
        Self::from_flat(spec, flat)
    }
}

/// Inputs with one-hot targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    x: Matrix,
    y: Matrix,
}

impl MiniBatch {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(MlError::InvalidBatch(format!(
                "{} inputs but {} targets",
                x.rows(),
                y.rows()
            )));
        }
        if x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(MlError::InvalidBatch("non-finite input".into()));
        }
        for (i, row) in y.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                return Err(MlError::InvalidBatch(format!(
                    "target row {i} is not a probability vector"
                )));
            }
        }
        Ok(MiniBatch { x, y })
    }

    pub fn from_labels(x: Matrix, labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut y = Matrix::zeros(labels.len(), num_classes);
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(MlError::InvalidBatch(format!(
                    "label {l} at row {i} is out of range"
                )));
            }
            y.set(i, l, 1.0);
        }
        Self::new(x, y)
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Self::from_labels(ds.x().clone(), ds.labels(), ds.class_count())
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &Matrix {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1.0,
            batch_size: 32,
            local_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(MlError::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

struct Trace {
    /// Layer inputs: `inputs[0]` is the batch, `inputs[l]` the activation feeding layer `l`.
    inputs: Vec<Matrix>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Matrix>,
    /// Output logits.
    logits: Matrix,
}

fn check_input(spec: &ModelSpec, params: &ModelParams, x: &Matrix) -> Result<()> {
    if params.layer_dims() != spec.layer_dims().as_slice() {
        return Err(MlError::Dimension(
            "parameters do not match the model shape".into(),
        ));
    }
    if x.cols() != spec.input_dim {
        return Err(MlError::Dimension(format!(
            "model expects {} features, input has {}",
            spec.input_dim,
            x.cols()
        )));
    }
    Ok(())
}

fn run_forward(spec: &ModelSpec, params: &ModelParams, x: &Matrix) -> Trace {
    let layers = params.layers();
    let mut inputs = vec![x.clone()];
    let mut pre = Vec::with_capacity(layers.len() - 1);
    let beta = spec.leaky_slope;
    for (l, layer) in layers.iter().enumerate().take(layers.len() - 1) {
        let z = inputs[l].affine(layer.weights, layer.bias);
        let act = spec.activation(l).expect("hidden layer activation");
        let mut a = z.clone();
        a.map_inplace(|t| act.apply(t, beta));
        pre.push(z);
        inputs.push(a);
    }
    let last = layers.last().expect("at least one layer");
    let logits = inputs
        .last()
        .expect("input")
        .affine(last.weights, last.bias);
    Trace {
        inputs,
        pre,
        logits,
    }
}

/// Row-wise class probabilities from output logits.
fn probabilities(spec: &ModelSpec, logits: &Matrix) -> Matrix {
    let k = spec.num_classes;
    let mut out = Matrix::zeros(logits.rows(), k);
    for i in 0..logits.rows() {
        let z = logits.row(i);
        let dst = out.row_mut(i);
        match spec.head() {
            OutputHead::BinarySigmoid => {
                let p = sigmoid(z[0]);
                dst[0] = 1.0 - p;
                dst[1] = p;
            }
            OutputHead::Softmax => {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (d, &v) in dst.iter_mut().zip(z) {
                    *d = (v - max).exp();
                    total += *d;
                }
                dst.iter_mut().for_each(|d| *d /= total);
            }
            OutputHead::IndependentSigmoid => {
                let mut total = 0.0;
                for (d, &v) in dst.iter_mut().zip(z) {
                    *d = sigmoid(v);
                    total += *d;
                }
                dst.iter_mut().for_each(|d| *d /= total);
            }
        }
    }
    out
}

fn bce(p: f64, y: f64) -> f64 {
    -(y * p.max(PROB_FLOOR).ln() + (1.0 - y) * (1.0 - p).max(PROB_FLOOR).ln())
}

/// Per-sample losses.
fn sample_losses(spec: &ModelSpec, logits: &Matrix, y: &Matrix) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let z = logits.row(i);
            let t = y.row(i);
            match spec.head() {
                OutputHead::BinarySigmoid => bce(sigmoid(z[0]), t[1]),
                OutputHead::Softmax => {
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
                    z.iter()
                        .zip(t)
                        .filter(|(_, &ti)| ti != 0.0)
                        .map(|(&zi, &ti)| -ti * ((zi - max).exp() / total).max(PROB_FLOOR).ln())
                        .sum()
                }
                OutputHead::IndependentSigmoid => {
                    z.iter()
                        .zip(t)
                        .map(|(&zi, &ti)| bce(sigmoid(zi), ti))
                        .sum::<f64>()
                        / z.len() as f64
                }
            }
        })
        .collect()
}

/// Class-probability matrix; each row sums to one.
pub fn forward(spec: &ModelSpec, params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    check_input(spec, params, x)?;
    let trace = run_forward(spec, params, x);
    Ok(probabilities(spec, &trace.logits))
}

/// Mean cross-entropy over the batch.
pub fn cost(spec: &ModelSpec, params: &ModelParams, batch: &MiniBatch) -> Result<f64> {
    check_input(spec, params, batch.x())?;
    check_targets(spec, batch)?;
    if batch.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    let trace = run_forward(spec, params, batch.x());
    let losses = sample_losses(spec, &trace.logits, batch.y());
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn check_targets(spec: &ModelSpec, batch: &MiniBatch) -> Result<()> {
    if batch.y().cols() != spec.num_classes {
        return Err(MlError::Dimension(format!(
            "model has {} classes, targets have {}",
            spec.num_classes,
            batch.y().cols()
        )));
    }
    Ok(())
}

/// Backpropagated gradient of [`cost`] with respect to the flat parameters.
pub fn gradients(spec: &ModelSpec, params: &ModelParams, batch: &MiniBatch) -> Result<Vec<f64>> {
    check_input(spec, params, batch.x())?;
    check_targets(spec, batch)?;
    if batch.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    let trace = run_forward(spec, params, batch.x());
    let m = batch.len() as f64;
    let y = batch.y();

    // dC/dlogits, already divided by the batch size.
    let mut delta = Matrix::zeros(trace.logits.rows(), trace.logits.cols());
    for i in 0..delta.rows() {
        let z = trace.logits.row(i);
        let t = y.row(i);
        let d = delta.row_mut(i);
        match spec.head() {
            OutputHead::BinarySigmoid => d[0] = (sigmoid(z[0]) - t[1]) / m,
            OutputHead::Softmax => {
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
                for j in 0..z.len() {
                    d[j] = ((z[j] - max).exp() / total - t[j]) / m;
                }
            }
            OutputHead::IndependentSigmoid => {
                let k = z.len() as f64;
                for j in 0..z.len() {
                    d[j] = (sigmoid(z[j]) - t[j]) / (k * m);
                }
            }
        }
    }

    let layers = params.layers();
    let mut grads: Vec<Vec<f64>> = vec![Vec::new(); layers.len()];
    let beta = spec.leaky_slope;
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let mut g = trace.inputs[l].transpose_mul(&delta);
        g.extend(delta.column_sums());
        grads[l] = g;
        if l > 0 {
            let mut back = delta.mul_weights_transposed(layer.weights, layer.fan_in);
            let act = spec.activation(l - 1).expect("hidden activation");
            let z = &trace.pre[l - 1];
            for (b, &zv) in back.as_mut_slice().iter_mut().zip(z.as_slice()) {
                *b *= act.derivative(zv, beta);
            }
            delta = back;
        }
    }
    Ok(grads.concat())
}

/// `W - lr * grad`.
pub fn sgd_step(params: &ModelParams, grad: &[f64], learning_rate: f64) -> Result<ModelParams> {
    if grad.len() != params.len() {
        return Err(MlError::Dimension(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.len()
        )));
    }
    Ok(ModelParams {
        flat: params
            .flat
            .iter()
            .zip(grad)
            .map(|(w, g)| w - learning_rate * g)
            .collect(),
        layers: params.layers.clone(),
    })
}

/// Runs `cfg.local_epochs` epochs of shuffled mini-batch SGD. Each epoch draws
/// a fresh permutation from `rng`; the final partial batch is kept.
pub fn train_local<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ModelParams,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    cfg.validate()?;
    let mut current = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = MiniBatch::from_labels(
                data.x().select_rows(chunk),
                &chunk.iter().map(|&i| data.labels()[i]).collect::<Vec<_>>(),
                data.class_count(),
            )?;
            let g = gradients(spec, &current, &batch)?;
            current = sgd_step(&current, &g, cfg.learning_rate)?;
        }
    }
    Ok(current)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub test_error: f64,
    /// Fraction of samples whose most probable class matches the label.
    pub accuracy: f64,
}

pub fn evaluate(spec: &ModelSpec, params: &ModelParams, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(MlError::EmptyDataset);
    }
    let batch = MiniBatch::from_dataset(data)?;
    check_input(spec, params, batch.x())?;
    check_targets(spec, &batch)?;
    let trace = run_forward(spec, params, batch.x());
    let losses = sample_losses(spec, &trace.logits, batch.y());
    let probs = probabilities(spec, &trace.logits);
    let correct = probs
        .iter_rows()
        .zip(data.labels())
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    Ok(Evaluation {
        test_error: losses.iter().sum::<f64>() / losses.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
