//! Small dense models, their losses and an exact backpropagation oracle.
//!
//! Parameter layout is fixed: layers in order, each layer stores its weight
//! matrix row-major as `fan_out x fan_in` followed by its `fan_out` biases.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peft::TrainableMask;
use crate::rng;

/// Flat vector of parameters or gradient coordinates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(self, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        for (s, v) in self.0.iter_mut().zip(x) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.0.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Geometry of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl DenseLayer {
    pub fn weight_len(&self) -> usize {
        self.fan_in * self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl ModelSpec {
    pub fn linear(input: usize, output: usize, loss: LossKind) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Linear,
            layer_sizes: vec![input, output],
            activation: Activation::Tanh,
            loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(layer_sizes: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            layer_sizes,
            activation,
            loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "model.layers",
                "need at least an input and an output size",
            ));
        }
        if self.kind == ModelKind::Linear && self.layer_sizes.len() != 2 {
            return Err(Error::config(
                "model.layers",
                "a linear model has exactly two sizes",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("model.layers", "sizes must be positive"));
        }
        if self.loss == LossKind::CrossEntropy && self.output_dim() < 2 {
            return Err(Error::config(
                "model.loss",
                "cross-entropy needs at least two outputs",
            ));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn layers(&self) -> Vec<DenseLayer> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let layer = DenseLayer {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform `[-a, a]` with `a = 1/sqrt(fan_in)` for every weight and bias,
    /// drawn layer by layer in layout order from ChaCha8 seeded by
    /// `derive_seed(seed, "init", [])`.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng::seeded_rng(seed, "init", &[]);
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            let a = 1.0 / (layer.fan_in as f64).sqrt();
            for _ in 0..layer.weight_len() + layer.fan_out {
                out.push(rng.gen_range(-a..=a));
            }
        }
        ParamVector(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// Row-major `n_samples x output_dim` regression targets.
    Targets(Vec<f64>),
}

/// Input rows plus labels; rows are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f64>,
    input_dim: usize,
    labels: Labels,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, input_dim: usize, labels: Labels) -> Result<Self> {
        if input_dim == 0 || !inputs.len().is_multiple_of(input_dim) {
            return Err(Error::shape("batch inputs", input_dim, inputs.len()));
        }
        let n = inputs.len() / input_dim;
        if n == 0 {
            return Err(Error::Empty("batch has no samples"));
        }
        match &labels {
            Labels::Classes(c) if c.len() != n => return Err(Error::shape("batch labels", n, c.len())),
            Labels::Targets(t) if t.len() % n != 0 || t.is_empty() => {
                return Err(Error::shape("batch targets", n, t.len()))
            }
            _ => {}
        }
        Ok(Batch {
            inputs,
            input_dim,
            labels,
        })
    }

    pub fn classification(inputs: Vec<f64>, input_dim: usize, labels: Vec<usize>) -> Result<Self> {
        Batch::new(inputs, input_dim, Labels::Classes(labels))
    }

    pub fn regression(inputs: Vec<f64>, input_dim: usize, targets: Vec<f64>) -> Result<Self> {
        Batch::new(inputs, input_dim, Labels::Targets(targets))
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes(c) => Some(c),
            Labels::Targets(_) => None,
        }
    }

    /// New batch holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(rows.len() * self.input_dim);
        for &r in rows {
            inputs.extend_from_slice(self.row(r));
        }
        let labels = match &self.labels {
            Labels::Classes(c) => Labels::Classes(rows.iter().map(|&r| c[r]).collect()),
            Labels::Targets(t) => {
                let k = t.len() / self.len();
                let mut out = Vec::with_capacity(rows.len() * k);
                for &r in rows {
                    out.extend_from_slice(&t[r * k..(r + 1) * k]);
                }
                Labels::Targets(out)
            }
        };
        Batch::new(inputs, self.input_dim, labels)
    }

    fn check_against(&self, model: &ModelSpec) -> Result<()> {
        if self.input_dim != model.input_dim() {
            return Err(Error::shape("batch input dim", model.input_dim(), self.input_dim));
        }
        match (&self.labels, model.loss) {
            (Labels::Classes(c), LossKind::CrossEntropy) => {
                if let Some(&bad) = c.iter().find(|&&c| c >= model.output_dim()) {
                    return Err(Error::shape("class label bound", model.output_dim(), bad));
                }
            }
            (Labels::Targets(t), LossKind::Mse) => {
                if t.len() != self.len() * model.output_dim() {
                    return Err(Error::shape(
                        "regression targets",
                        self.len() * model.output_dim(),
                        t.len(),
                    ));
                }
            }
            (Labels::Classes(_), LossKind::Mse) => {
                return Err(Error::config("model.loss", "MSE needs real-valued targets"))
            }
            (Labels::Targets(_), LossKind::CrossEntropy) => {
                return Err(Error::config("model.loss", "cross-entropy needs class labels"))
            }
        }
        Ok(())
    }
}

/// Accumulates forward-pass counts. Addition commutes, so concurrent
/// evaluation still yields a deterministic total.
#[derive(Debug, Default)]
pub struct PassCounter(AtomicU64);

impl PassCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}[{i}] = {} is not finite", values[i])));
    }
    Ok(())
}

/// Per-sample forward pass returning the output layer pre-activations and
/// optionally every intermediate activation (input included).
fn forward_sample(
    model: &ModelSpec,
    layers: &[DenseLayer],
    params: &[f64],
    x: &[f64],
    trace: Option<&mut Vec<Vec<f64>>>,
) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut trace = trace;
    for (l, layer) in layers.iter().enumerate() {
        let w = &params[layer.weight_offset..layer.bias_offset];
        let b = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
        let mut z: Vec<f64> = (0..layer.fan_out)
            .map(|o| dot(&w[o * layer.fan_in..(o + 1) * layer.fan_in], &a) + b[o])
            .collect();
        if l + 1 < layers.len() {
            z.iter_mut().for_each(|v| *v = model.activation.apply(*v));
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(std::mem::replace(&mut a, z));
        } else {
            a = z;
        }
    }
    a
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss of one sample and its derivative w.r.t. the output pre-activations.
fn sample_loss(model: &ModelSpec, batch: &Batch, i: usize, out: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
    match batch.labels() {
        Labels::Classes(c) => {
            let y = c[i];
            let lse = log_sum_exp(out);
            let loss = lse - out[y];
            let grad = if want_grad {
                let mut g: Vec<f64> = out.iter().map(|v| (v - lse).exp()).collect();
                g[y] -= 1.0;
                g
            } else {
                Vec::new()
            };
            (loss, grad)
        }
        Labels::Targets(t) => {
            let k = model.output_dim();
            let target = &t[i * k..(i + 1) * k];
            let loss = out.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum();
            let grad = if want_grad {
                out.iter().zip(target).map(|(o, t)| 2.0 * (o - t)).collect()
            } else {
                Vec::new()
            };
            (loss, grad)
        }
    }
}

/// Mean loss of a full (materialized) parameter vector.
pub fn full_loss(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<f64> {
    if params.len() != model.param_count() {
        return Err(Error::shape("full parameters", model.param_count(), params.len()));
    }
    batch.check_against(model)?;
    check_finite(params, "parameter")?;
    let layers = model.layers();
    let total: f64 = (0..batch.len())
        .map(|i| {
            let out = forward_sample(model, &layers, params, batch.row(i), None);
            sample_loss(model, batch, i, &out, false).0
        })
        .sum();
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {loss}")));
    }
    Ok(loss)
}

/// Exact gradient of the mean loss w.r.t. the full parameter vector.
pub fn full_gradient(model: &ModelSpec, params: &[f64], batch: &Batch) -> Result<ParamVector> {
    if params.len() != model.param_count() {
        return Err(Error::shape("full parameters", model.param_count(), params.len()));
    }
    batch.check_against(model)?;
    check_finite(params, "parameter")?;
    let layers = model.layers();
    let mut grad = vec![0.0; params.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut trace = Vec::with_capacity(layers.len());
    for i in 0..batch.len() {
        trace.clear();
        let out = forward_sample(model, &layers, params, batch.row(i), Some(&mut trace));
        let (_, mut delta) = sample_loss(model, batch, i, &out, true);
        for (l, layer) in layers.iter().enumerate().rev() {
            let a_in = &trace[l];
            for o in 0..layer.fan_out {
                let d = delta[o] * scale;
                grad[layer.bias_offset + o] += d;
                let row = layer.weight_offset + o * layer.fan_in;
                for (g, a) in grad[row..row + layer.fan_in].iter_mut().zip(a_in) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let w = &params[layer.weight_offset..layer.bias_offset];
                delta = (0..layer.fan_in)
                    .map(|j| {
                        let back: f64 = (0..layer.fan_out)
                            .map(|o| w[o * layer.fan_in + j] * delta[o])
                            .sum();
                        back * model.activation.grad_from_output(a_in[j])
                    })
                    .collect();
            }
        }
    }
    let grad = ParamVector(grad);
    check_finite(&grad, "gradient")?;
    Ok(grad)
}

/// Mean loss over the batch of the model composed from frozen and trainable
/// weights. Counts one forward pass.
pub fn forward_loss(
    model: &ModelSpec,
    frozen: &[f64],
    mask: &TrainableMask,
    trainable: &[f64],
    batch: &Batch,
    counter: &PassCounter,
) -> Result<f64> {
    check_finite(trainable, "trainable")?;
    let full = mask.materialize(model, frozen, trainable)?;
    counter.add(1);
    full_loss(model, &full, batch)
}

/// Exact gradient of the mean loss w.r.t. the trainable coordinates.
pub fn analytic_gradient(
    model: &ModelSpec,
    frozen: &[f64],
    mask: &TrainableMask,
    trainable: &[f64],
    batch: &Batch,
) -> Result<ParamVector> {
    check_finite(trainable, "trainable")?;
    let full = mask.materialize(model, frozen, trainable)?;
    let full_grad = full_gradient(model, &full, batch)?;
    mask.pullback(model, frozen, trainable, &full_grad)
}

/// Index of the largest output; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(
    model: &ModelSpec,
    frozen: &[f64],
    mask: &TrainableMask,
    trainable: &[f64],
    dataset: &Batch,
) -> Result<f64> {
    if model.loss != LossKind::CrossEntropy {
        return Err(Error::UnsupportedMetric("accuracy"));
    }
    dataset.check_against(model)?;
    let full = mask.materialize(model, frozen, trainable)?;
    check_finite(&full, "parameter")?;
    let labels = dataset.class_labels().ok_or(Error::UnsupportedMetric("accuracy"))?;
    let layers = model.layers();
    let correct = (0..dataset.len())
        .filter(|&i| argmax(&forward_sample(model, &layers, &full, dataset.row(i), None)) == labels[i])
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_mask() -> TrainableMask {
        TrainableMask::Full
    }

    #[test]
    fn layout_counts() {
        let m = ModelSpec::mlp(vec![10, 5, 2], Activation::Relu, LossKind::CrossEntropy).unwrap();
        assert_eq!(m.param_count(), 67);
        let l = m.layers();
        assert_eq!(l[0].bias_offset, 50);
        assert_eq!(l[1].weight_offset, 55);
        assert_eq!(l[1].bias_offset, 65);
    }

    #[test]
    fn zero_linear_cross_entropy_is_ln2() {
        let m = ModelSpec::linear(2, 2, LossKind::CrossEntropy).unwrap();
        let b = Batch::classification(vec![0.3, -1.0, 2.0, 0.5], 2, vec![0, 1]).unwrap();
        let zeros = vec![0.0; m.param_count()];
        let c = PassCounter::new();
        let loss = forward_loss(&m, &zeros, &full_mask(), &zeros, &b, &c).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(c.get(), 1);
    }

    #[test]
    fn exact_fit_mse_is_zero() {
        let m = ModelSpec::linear(1, 1, LossKind::Mse).unwrap();
        let b = Batch::regression(vec![0.5], 1, vec![0.5]).unwrap();
        let p = vec![1.0, 0.0];
        let c = PassCounter::new();
        assert_eq!(forward_loss(&m, &p, &full_mask(), &p, &b, &c).unwrap(), 0.0);
        let g = analytic_gradient(&m, &p, &full_mask(), &p, &b).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mse_weight_gradient_is_two_theta() {
        let m = ModelSpec::linear(1, 1, LossKind::Mse).unwrap();
        let b = Batch::regression(vec![1.0], 1, vec![0.0]).unwrap();
        let p = vec![1.0, 0.0];
        let g = analytic_gradient(&m, &p, &full_mask(), &p, &b).unwrap();
        assert_eq!(g[0], 2.0);
    }

    #[test]
    fn shape_and_numeric_errors() {
        let m = ModelSpec::linear(2, 2, LossKind::CrossEntropy).unwrap();
        let b = Batch::classification(vec![0.0, 0.0], 2, vec![1]).unwrap();
        let c = PassCounter::new();
        let short = vec![0.0; 5];
        assert!(matches!(
            forward_loss(&m, &short, &full_mask(), &short, &b, &c),
            Err(Error::Shape { .. })
        ));
        let mut bad = vec![0.0; 6];
        bad[2] = f64::NAN;
        assert!(matches!(
            forward_loss(&m, &bad, &full_mask(), &bad, &b, &c),
            Err(Error::Numeric(_))
        ));
        let oob = Batch::classification(vec![0.0, 0.0], 2, vec![2]).unwrap();
        let p = vec![0.0; 6];
        assert!(forward_loss(&m, &p, &full_mask(), &p, &oob, &c).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModelSpec::linear(3, 1, LossKind::CrossEntropy).is_err());
        assert!(ModelSpec::mlp(vec![3], Activation::Relu, LossKind::Mse).is_err());
        assert!(ModelSpec::mlp(vec![3, 0, 2], Activation::Relu, LossKind::Mse).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn zero_model_balanced_accuracy_is_half() {
        let m = ModelSpec::linear(1, 2, LossKind::CrossEntropy).unwrap();
        let b = Batch::classification(vec![1.0, 2.0, 3.0, 4.0], 1, vec![0, 1, 0, 1]).unwrap();
        let p = vec![0.0; 4];
        assert_eq!(accuracy(&m, &p, &full_mask(), &p, &b).unwrap(), 0.5);
    }

    #[test]
    fn perfect_separator_accuracy() {
        let m = ModelSpec::linear(1, 2, LossKind::CrossEntropy).unwrap();
        let b = Batch::classification(vec![-2.0, -1.0, 1.0, 2.0], 1, vec![0, 0, 1, 1]).unwrap();
        // logit0 = -x, logit1 = x
        let p = vec![-1.0, 1.0, 0.0, 0.0];
        assert_eq!(accuracy(&m, &p, &full_mask(), &p, &b).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_rejects_mse() {
        let m = ModelSpec::linear(1, 1, LossKind::Mse).unwrap();
        let b = Batch::regression(vec![1.0], 1, vec![1.0]).unwrap();
        let p = vec![0.0; 2];
        assert!(matches!(
            accuracy(&m, &p, &full_mask(), &p, &b),
            Err(Error::UnsupportedMetric(_))
        ));
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let m = ModelSpec::mlp(vec![4, 8, 3], Activation::Tanh, LossKind::CrossEntropy).unwrap();
        let a = m.init_params(0);
        assert_eq!(a, m.init_params(0));
        assert_ne!(a, m.init_params(1));
        for layer in m.layers() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            let end = layer.bias_offset + layer.fan_out;
            assert!(a[layer.weight_offset..end].iter().all(|v| v.abs() <= bound));
        }
    }
}
