//! Dense feed-forward regression network: ReLU hidden layers, identity output,
//! mean squared error, mini-batch Adam.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, CodecSpec, Dataset};
use crate::seed;

pub const FORMAT: &str = "evcrp-network";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NeuroError {
    #[error("network needs at least an input and an output layer")]
    EmptyDims,
    #[error("layer widths must be positive")]
    ZeroWidth,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("dataset has too few records ({0}) to train")]
    TooFewRecords(usize),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("model file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One affine layer, `weights` shaped `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub dims: Vec<usize>,
    pub layers: Vec<Layer>,
    pub codec: Option<CodecSpec>,
}

pub fn desk_hidden() -> Vec<usize> {
    vec![256, 128, 64, 32]
}

/// Nine hidden layers tapering geometrically from 800 to 50.
pub fn full_hidden() -> Vec<usize> {
    vec![800, 573, 410, 294, 210, 151, 108, 77, 50]
}

pub fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(input);
    dims.extend_from_slice(hidden);
    dims.push(output);
    dims
}

/// He-normal weights (`std = √(2/fan_in)`), zero biases.
pub fn init_network(dims: &[usize], seed: u64) -> Result<Network, NeuroError> {
    if dims.len() < 2 {
        return Err(NeuroError::EmptyDims);
    }
    if dims.contains(&0) {
        return Err(NeuroError::ZeroWidth);
    }
    let mut rng = seed::derived_rng(seed, seed::stream::INIT, 0);
    let layers = dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Layer {
                weights: Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng)),
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(Network {
        dims: dims.to_vec(),
        layers,
        codec: None,
    })
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

impl Network {
    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NeuroError> {
        if x.len() != self.input_dim() {
            return Err(NeuroError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut a = Array1::from(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            a = layer.weights.dot(&a) + &layer.bias;
            if i < last {
                a.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            }
        }
        Ok(a.to_vec())
    }

    /// Row-wise forward pass over a `(n, input)` batch.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NeuroError> {
        self.check_input(x.ncols())?;
        Ok(self.activations(x).pop().expect("output layer"))
    }

    fn check_input(&self, got: usize) -> Result<(), NeuroError> {
        if got != self.input_dim() {
            return Err(NeuroError::Dimension {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    /// Post-activation outputs of every layer, input first.
    fn activations(&self, x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = acts[i].dot(&layer.weights.t()) + &layer.bias;
            if i < last {
                relu_inplace(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    /// SHA-256 over dims and parameters (little-endian bit patterns).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for &d in &self.dims {
            h.update((d as u64).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weights.iter().chain(layer.bias.iter()) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Mean of squared errors over every element of every sample.
pub fn loss_mse(pred: ArrayView2<f64>, label: ArrayView2<f64>) -> Result<f64, NeuroError> {
    if pred.dim() != label.dim() {
        return Err(NeuroError::Dimension {
            expected: label.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok((&pred - &label).mapv(|e| e * e).mean().expect("non-empty"))
}

/// Per-layer parameter gradients, same shapes as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights *= s;
            l.bias *= s;
        }
    }
}

/// Exact gradient of `loss_mse(forward(x), y)`; the ReLU derivative at 0 is 0.
pub fn backward(net: &Network, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<(f64, Gradients), NeuroError> {
    net.check_input(x.ncols())?;
    if y.ncols() != net.output_dim() || y.nrows() != x.nrows() {
        return Err(NeuroError::Dimension {
            expected: x.nrows() * net.output_dim(),
            got: y.len(),
        });
    }
    let acts = net.activations(x);
    let out = acts.last().expect("output");
    let diff = out - &y;
    let count = diff.len().max(1) as f64;
    let loss = diff.mapv(|e| e * e).sum() / count;
    let mut delta = diff * (2.0 / count);
    let mut grads = Gradients::zeros_like(net);
    for i in (0..net.layers.len()).rev() {
        let g = &mut grads.layers[i];
        g.weights = delta.t().dot(&acts[i]);
        g.bias = delta.sum_axis(Axis(0));
        if i > 0 {
            let mut prev = delta.dot(&net.layers[i].weights);
            ndarray::Zip::from(&mut prev).and(&acts[i]).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = prev;
        }
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_norm: f64,
    /// Fraction of records held out for validation.
    pub validation_fraction: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: 10.0,
            validation_fraction: 0.2,
            hidden: desk_hidden(),
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), NeuroError> {
        let bad = |m: &str| Err(NeuroError::Hyperparams(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub train_size: usize,
    pub val_size: usize,
    pub checksum: String,
}

struct Adam {
    m: Gradients,
    v: Gradients,
    step: i32,
}

impl Adam {
    fn new(net: &Network) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
        }
    }

    fn update(&mut self, net: &mut Network, grads: &Gradients, hp: &Hyperparams) {
        self.step += 1;
        let c1 = 1.0 - hp.beta1.powi(self.step);
        let c2 = 1.0 - hp.beta2.powi(self.step);
        let step = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            *p -= hp.learning_rate * (*m / c1) / ((*v / c2).sqrt() + hp.epsilon);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| step(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| step(p, g, m, v));
        }
    }
}

fn stack(rows: &[&[f64]], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), width));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(*r));
    }
    out
}

/// Deterministic train/validation split of record indices.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::derived_rng(seed, seed::stream::SPLIT, 0));
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn dataset_loss(net: &Network, x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    if x.nrows() == 0 {
        return f64::NAN;
    }
    let pred = net.activations(x.view()).pop().expect("output");
    loss_mse(pred.view(), y.view()).expect("matching shapes")
}

/// Mini-batch Adam with per-epoch reshuffling. Losses are recorded after
/// each epoch; the validation loss is `NaN` when nothing is held out.
pub fn train(net: &mut Network, dataset: &Dataset, hp: &Hyperparams) -> Result<TrainReport, NeuroError> {
    hp.validate()?;
    let spec = dataset.spec;
    if let Some(own) = &net.codec {
        own.ensure_eq(&spec)?;
    }
    for (expected, got) in [
        (spec.feature_len(), net.input_dim()),
        (spec.label_len(), net.output_dim()),
    ] {
        if expected != got {
            return Err(NeuroError::Codec(CodecError::Format(format!(
                "network width {got} does not fit codec width {expected}"
            ))));
        }
    }
    let n = dataset.records.len();
    if n == 0 {
        return Err(NeuroError::TooFewRecords(n));
    }
    let (train_idx, val_idx) = split_indices(n, hp.validation_fraction, hp.seed);
    let gather = |idx: &[usize]| {
        let f: Vec<&[f64]> = idx.iter().map(|&i| dataset.records[i].features.as_slice()).collect();
        let l: Vec<&[f64]> = idx.iter().map(|&i| dataset.records[i].label.as_slice()).collect();
        (stack(&f, spec.feature_len()), stack(&l, spec.label_len()))
    };
    let (x_train, y_train) = gather(&train_idx);
    let (x_val, y_val) = gather(&val_idx);

    let mut adam = Adam::new(net);
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(hp.epochs),
        val_loss: Vec::with_capacity(hp.epochs),
        train_size: train_idx.len(),
        val_size: val_idx.len(),
        checksum: String::new(),
    };
    let mut order: Vec<usize> = (0..train_idx.len()).collect();
    for epoch in 0..hp.epochs {
        order.shuffle(&mut seed::derived_rng(hp.seed, seed::stream::SHUFFLE, epoch as u64));
        for chunk in order.chunks(hp.batch_size) {
            let xb = x_train.select(Axis(0), chunk);
            let yb = y_train.select(Axis(0), chunk);
            let (_, mut grads) = backward(net, xb.view(), yb.view())?;
            let norm = grads.norm();
            if norm > hp.clip_norm {
                grads.scale(hp.clip_norm / norm);
            }
            adam.update(net, &grads, hp);
        }
        let tl = dataset_loss(net, &x_train, &y_train);
        let vl = dataset_loss(net, &x_val, &y_val);
        if !tl.is_finite() {
            return Err(NeuroError::Hyperparams(format!("training diverged at epoch {}", epoch + 1)));
        }
        log::debug!("epoch {} train {tl:.6} val {vl:.6}", epoch + 1);
        report.train_loss.push(tl);
        report.val_loss.push(vl);
    }
    net.codec = Some(spec);
    report.checksum = net.checksum();
    Ok(report)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    dims: Vec<usize>,
    codec: Option<CodecSpec>,
    /// Per layer, row-major `(out, in)`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    checksum: String,
}

pub fn save_model(net: &Network, path: &Path) -> Result<(), NeuroError> {
    let file = ModelFile {
        format: FORMAT.into(),
        version: VERSION,
        dims: net.dims.clone(),
        codec: net.codec,
        weights: net
            .layers
            .iter()
            .map(|l| l.weights.as_standard_layout().iter().copied().collect())
            .collect(),
        biases: net.layers.iter().map(|l| l.bias.to_vec()).collect(),
        checksum: net.checksum(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &file)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network, NeuroError> {
    let file: ModelFile = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| NeuroError::Corrupt(e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(NeuroError::Corrupt(format!(
            "unsupported format {} v{}",
            file.format, file.version
        )));
    }
    let dims = file.dims;
    if dims.len() < 2 || file.weights.len() != dims.len() - 1 || file.biases.len() != dims.len() - 1 {
        return Err(NeuroError::Corrupt("layer count disagrees with dims".into()));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for (i, (w, b)) in file.weights.into_iter().zip(file.biases).enumerate() {
        let weights = Array2::from_shape_vec((dims[i + 1], dims[i]), w)
            .map_err(|e| NeuroError::Corrupt(format!("layer {i}: {e}")))?;
        if b.len() != dims[i + 1] {
            return Err(NeuroError::Corrupt(format!("layer {i}: bias length")));
        }
        layers.push(Layer {
            weights,
            bias: Array1::from(b),
        });
    }
    let net = Network {
        dims,
        layers,
        codec: file.codec,
    };
    if net.checksum() != file.checksum {
        return Err(NeuroError::Corrupt("checksum mismatch".into()));
    }
    Ok(net)
}

/// Loads a model and refuses it unless it was trained for `spec`.
pub fn load_model_for(path: &Path, spec: &CodecSpec) -> Result<Network, NeuroError> {
    let net = load_model(path)?;
    match &net.codec {
        Some(own) => own.ensure_eq(spec)?,
        None => {
            return Err(NeuroError::Codec(CodecError::Format(
                "model carries no codec description".into(),
            )))
        }
    }
    Ok(net)
}
