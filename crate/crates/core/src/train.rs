//! Quantization-aware training of fully-connected networks.
//!
//! Master weights stay real. The forward pass fake-quantizes weights
//! (round-to-nearest, symmetric, per tensor) and activations (floor, through
//! the same quantizer the exported graph uses) and the backward pass treats
//! both quantizers as identity inside their clamp range. Pruning keeps the
//! `cap` largest-magnitude connections of every neuron.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{fc_node, BatchNorm, ChainStep, GraphIR, InputSpec, Node, UnivariateChain};
use crate::par;
use crate::quant::{dequantize, integer_range, quantize, quantize_with, saturates, QTensor, QuantError, QuantParams, RangeMode, Rounding};
use crate::reference::reference_eval;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("exported graph failed evaluation: {0}")]
    Export(String),
}

/// How the per-tensor weight scale follows the master weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScale {
    /// `max |w| / q_max`.
    MaxAbs,
    /// `factor * mean |w|` over active connections.
    MeanAbs { factor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    /// Multiply the rate by `gamma` every `step_epochs` epochs.
    pub step_epochs: usize,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Feature counts from input to output.
    pub layers: Vec<usize>,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub input_bits: u32,
    pub weight_range: RangeMode,
    pub act_range: RangeMode,
    pub input_range: RangeMode,
    pub weight_scale: WeightScale,
    /// Fixed activation quantizer scale; batch norm learns to match it.
    pub act_scale: f64,
    /// Maximum nonzero weights per neuron. Values above a layer's fan-in
    /// leave that layer dense.
    pub active_connections_cap: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    /// First epoch (0-based) at which masks are recomputed; the final epoch
    /// always prunes so the cap holds at export.
    pub pruning_start_epoch: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub seed: u64,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: vec![784, 192, 192, 10],
            weight_bits: 2,
            act_bits: 2,
            input_bits: 2,
            weight_range: RangeMode::Narrow,
            act_range: RangeMode::Narrow,
            input_range: RangeMode::Narrow,
            weight_scale: WeightScale::MeanAbs { factor: 1.4 },
            act_scale: 1.0,
            active_connections_cap: 150,
            epochs: 20,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_schedule: LrSchedule { step_epochs: 8, gamma: 0.3 },
            pruning_start_epoch: 1,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
            seed: 0,
            train_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.layers.len() < 2 || self.layers.contains(&0) {
            return bad(format!("layers must list at least two nonzero sizes, got {:?}", self.layers));
        }
        for (name, b) in [("weight_bits", self.weight_bits), ("act_bits", self.act_bits), ("input_bits", self.input_bits)] {
            if !(2..=8).contains(&b) {
                return bad(format!("{name} = {b} outside [2, 8]"));
            }
        }
        if self.active_connections_cap == 0 {
            return bad("active_connections_cap must be at least 1".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.act_scale > 0.0) {
            return bad("learning_rate and act_scale must be positive, momentum in [0, 1)".into());
        }
        if let WeightScale::MeanAbs { factor } = self.weight_scale {
            if !(factor > 0.0) {
                return bad("weight_scale factor must be positive".into());
            }
        }
        if self.lr_schedule.step_epochs == 0 || !(self.lr_schedule.gamma > 0.0) {
            return bad("lr_schedule needs positive step_epochs and gamma".into());
        }
        Ok(())
    }

    /// Input quantizer over pixels in `[0, 1]`: zero point 0 and scale
    /// `1 / (q_max + 1)`, so pixel 0 is code 0.
    pub fn input_qparams(&self) -> Result<QuantParams, QuantError> {
        let (_, hi) = integer_range(self.input_bits, self.input_range)?;
        QuantParams::symmetric(1.0 / (hi as f64 + 1.0), self.input_bits, self.input_range)
    }

    pub fn act_qparams(&self) -> Result<QuantParams, QuantError> {
        QuantParams::symmetric(self.act_scale, self.act_bits, self.act_range)
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_schedule.gamma.powi((epoch / self.lr_schedule.step_epochs) as i32)
    }
}

/// One split: `images` is `[n, features]` with pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Split {
    pub images: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    /// Builds a split from row-major pixels.
    pub fn from_rows(pixels: Vec<f64>, features: usize, labels: Vec<usize>) -> Result<Self, TrainError> {
        let n = labels.len();
        let images = Array2::from_shape_vec((n, features), pixels)
            .map_err(|_| TrainError::Dataset(format!("pixel count is not {n} x {features}")))?;
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuantLayer {
    /// `[out, in]` master weights.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// 1 for active connections, 0 for pruned ones.
    pub mask: Array2<f64>,
    pub weight_bits: u32,
    pub weight_range: RangeMode,
    pub weight_scale: WeightScale,
    pub bn: Option<BatchNormState>,
    /// Output quantizer; absent on the terminal layer.
    pub act: Option<QuantParams>,
}

/// Quantized view of a layer's weights, shared by the forward pass and export.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub qparams: QuantParams,
    pub codes: Array2<i32>,
    /// `dequantize(codes)`; zero on pruned connections.
    pub values: Array2<f64>,
    /// Straight-through pass mask: active and not saturated.
    pub pass: Array2<f64>,
}

impl FakeQuantLayer {
    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weight_qparams(&self) -> Result<QuantParams, QuantError> {
        let (_, qmax) = integer_range(self.weight_bits, self.weight_range)?;
        let active = Zip::from(&self.weights).and(&self.mask).fold((0.0f64, 0.0f64, 0usize), |(mx, sum, n), &w, &m| {
            if m != 0.0 {
                (mx.max(w.abs()), sum + w.abs(), n + 1)
            } else {
                (mx, sum, n)
            }
        });
        let s = match self.weight_scale {
            WeightScale::MaxAbs => active.0 / qmax as f64,
            WeightScale::MeanAbs { factor } if active.2 > 0 => factor * active.1 / active.2 as f64,
            WeightScale::MeanAbs { .. } => 0.0,
        };
        QuantParams::symmetric(if s > 0.0 && s.is_finite() { s } else { 1.0 }, self.weight_bits, self.weight_range)
    }

    pub fn quantized_weights(&self) -> Result<QuantizedWeights, QuantError> {
        let qp = self.weight_qparams()?;
        let mut codes = Array2::zeros(self.weights.raw_dim());
        let mut pass = Array2::zeros(self.weights.raw_dim());
        for ((idx, &w), &m) in self.weights.indexed_iter().zip(self.mask.iter()) {
            if m != 0.0 {
                codes[idx] = quantize_with(w, &qp, Rounding::Nearest)?;
                pass[idx] = if saturates(w, &qp, Rounding::Nearest) { 0.0 } else { 1.0 };
            }
        }
        let values = codes.mapv(|q| dequantize(q, &qp));
        Ok(QuantizedWeights { qparams: qp, codes, values, pass })
    }

    pub fn active_connections(&self) -> Vec<usize> {
        self.mask.rows().into_iter().map(|r| r.iter().filter(|&&m| m != 0.0).count()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardMode {
    /// Batch statistics in batch norm (else running statistics).
    pub training: bool,
    /// Fake quantization on; off gives the smooth surrogate network.
    pub quantize: bool,
}

impl ForwardMode {
    pub const TRAIN: Self = Self { training: true, quantize: true };
    pub const EVAL: Self = Self { training: false, quantize: true };
}

/// Values kept from the forward pass for [`ste_backward`].
#[derive(Debug, Clone)]
pub struct Cache {
    x: Array2<f64>,
    weights: Array2<f64>,
    weight_pass: Array2<f64>,
    xhat: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    act_pass: Option<Array2<f64>>,
    /// Batch mean and biased variance, for running-statistic updates.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

/// `act_dq(bn(x W_dq^T + b))` for a batch `x` of shape `[n, in]`.
pub fn fake_quant_forward(x: ArrayView2<f64>, layer: &FakeQuantLayer, mode: ForwardMode) -> Result<(Array2<f64>, Cache), QuantError> {
    let (weights, weight_pass) = if mode.quantize {
        let q = layer.quantized_weights()?;
        (q.values, q.pass)
    } else {
        (&layer.weights * &layer.mask, layer.mask.clone())
    };
    let mut z = x.dot(&weights.t());
    z += &layer.bias;

    let mut cache = Cache { x: x.to_owned(), weights, weight_pass, xhat: None, inv_std: None, act_pass: None, batch_stats: None };
    if let Some(bn) = &layer.bn {
        if mode.training {
            let n = z.nrows() as f64;
            let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
            let centered = &z - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
            let inv_std = var.mapv(|v| 1.0 / (v + bn.epsilon).sqrt());
            let xhat = &centered * &inv_std;
            z = &xhat * &bn.gamma + &bn.beta;
            cache.xhat = Some(xhat);
            cache.inv_std = Some(inv_std);
            cache.batch_stats = Some((mean, var));
        } else {
            // Same expression as the exported chain step.
            let ir = to_ir_batch_norm(bn);
            for mut row in z.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = ir.apply(c, *v);
                }
            }
        }
    }
    if let (Some(qp), true) = (&layer.act, mode.quantize) {
        let mut pass = Array2::zeros(z.raw_dim());
        for (v, p) in z.iter_mut().zip(pass.iter_mut()) {
            *p = if saturates(*v, qp, Rounding::Floor) { 0.0 } else { 1.0 };
            *v = dequantize(quantize(*v, qp)?, qp);
        }
        cache.act_pass = Some(pass);
    }
    Ok((z, cache))
}

/// Straight-through backward pass of [`fake_quant_forward`] in training mode.
pub fn ste_backward(grad_out: ArrayView2<f64>, layer: &FakeQuantLayer, cache: &Cache) -> (Array2<f64>, LayerGrads) {
    let mut g = grad_out.to_owned();
    if let Some(pass) = &cache.act_pass {
        g *= pass;
    }
    let (mut gamma, mut beta) = (None, None);
    if let (Some(bn), Some(xhat), Some(inv_std)) = (&layer.bn, &cache.xhat, &cache.inv_std) {
        let n = g.nrows() as f64;
        gamma = Some((&g * xhat).sum_axis(Axis(0)));
        beta = Some(g.sum_axis(Axis(0)));
        let dxhat = &g * &bn.gamma;
        let sum_d = dxhat.sum_axis(Axis(0));
        let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
        g = (&(&(dxhat * n) - &sum_d) - &(xhat * &sum_dx)) * &(inv_std / n);
    }
    let grad_in = g.dot(&cache.weights);
    let weights = g.t().dot(&cache.x) * &cache.weight_pass;
    let bias = g.sum_axis(Axis(0));
    (grad_in, LayerGrads { weights, bias, gamma, beta })
}

/// Mask keeping the `cap` largest `|w|` of every row, ties to the lowest index.
pub fn l1_mask(weights: ArrayView2<f64>, cap: usize) -> Array2<f64> {
    let mut mask = Array2::zeros(weights.raw_dim());
    let mut order: Vec<usize> = Vec::with_capacity(weights.ncols());
    for (row, mut out) in weights.rows().into_iter().zip(mask.rows_mut()) {
        order.clear();
        order.extend(0..row.len());
        let keep = cap.min(row.len());
        let cmp = |a: &usize, b: &usize| row[*b].abs().total_cmp(&row[*a].abs()).then(a.cmp(b));
        if keep < order.len() {
            order.select_nth_unstable_by(keep, cmp);
        }
        for &i in &order[..keep] {
            out[i] = 1.0;
        }
    }
    mask
}

/// Recomputes the layer mask from master magnitudes; pruned weights may
/// revive. Returns a warning when `cap` exceeds the fan-in.
pub fn prune_l1(layer: &mut FakeQuantLayer, cap: usize) -> Option<String> {
    if cap > layer.fan_in() {
        return Some(format!("cap {cap} exceeds fan-in {}; layer left dense", layer.fan_in()));
    }
    layer.mask = l1_mask(layer.weights.view(), cap);
    None
}

fn to_ir_batch_norm(bn: &BatchNormState) -> BatchNorm {
    BatchNorm {
        gamma: bn.gamma.to_vec(),
        beta: bn.beta.to_vec(),
        running_mean: bn.running_mean.to_vec(),
        running_var: bn.running_var.to_vec(),
        epsilon: bn.epsilon,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_qparams: QuantParams,
    pub layers: Vec<FakeQuantLayer>,
}

impl Network {
    /// Uniform `±sqrt(3 / fan_in)` initialization, unit batch norm.
    pub fn init(config: &TrainConfig, rng: &mut impl Rng) -> Result<Self, TrainError> {
        config.validate()?;
        let act = config.act_qparams()?;
        let n = config.layers.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, out) = (config.layers[l], config.layers[l + 1]);
                let bound = (3.0 / fan_in as f64).sqrt();
                let weights = Array2::from_shape_fn((out, fan_in), |_| rng.random_range(-bound..bound));
                let hidden = l + 1 < n;
                FakeQuantLayer {
                    weights,
                    bias: Array1::zeros(out),
                    mask: Array2::ones((out, fan_in)),
                    weight_bits: config.weight_bits,
                    weight_range: config.weight_range,
                    weight_scale: config.weight_scale,
                    bn: hidden.then(|| BatchNormState {
                        gamma: Array1::ones(out),
                        beta: Array1::zeros(out),
                        running_mean: Array1::zeros(out),
                        running_var: Array1::ones(out),
                        epsilon: config.bn_epsilon,
                    }),
                    act: hidden.then_some(act),
                }
            })
            .collect();
        Ok(Self { input_qparams: config.input_qparams()?, layers })
    }

    /// Input pixels after the input quantizer, as reals.
    pub fn quantize_inputs(&self, images: ArrayView2<f64>) -> Result<Array2<f64>, QuantError> {
        let qp = self.input_qparams;
        let mut out = Array2::zeros(images.raw_dim());
        for (o, &x) in out.iter_mut().zip(images.iter()) {
            *o = dequantize(quantize(x, &qp)?, &qp);
        }
        Ok(out)
    }

    pub fn forward(&self, x: ArrayView2<f64>, mode: ForwardMode) -> Result<(Array2<f64>, Vec<Cache>), QuantError> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let (next, cache) = fake_quant_forward(h.view(), layer, mode)?;
            caches.push(cache);
            h = next;
        }
        Ok((h, caches))
    }

    pub fn backward(&self, grad_logits: ArrayView2<f64>, caches: &[Cache]) -> Vec<LayerGrads> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_logits.to_owned();
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let (gi, lg) = ste_backward(g.view(), layer, cache);
            grads.push(lg);
            g = gi;
        }
        grads.reverse();
        grads
    }

    /// Classification accuracy of the fake-quantized network in eval mode on
    /// already-quantized inputs.
    pub fn accuracy(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64, QuantError> {
        let mut correct = 0usize;
        for start in (0..labels.len()).step_by(1024) {
            let end = (start + 1024).min(labels.len());
            let (logits, _) = self.forward(x.slice(s![start..end, ..]), ForwardMode::EVAL)?;
            correct += logits.rows().into_iter().zip(&labels[start..end]).filter(|(r, &y)| argmax(r.iter().copied()) == y).count();
        }
        Ok(correct as f64 / labels.len().max(1) as f64)
    }

    /// Integer graph with masks baked in and batch norm folded into chains.
    pub fn export(&self, metadata: BTreeMap<String, String>) -> Result<GraphIR, QuantError> {
        let features = self.layers[0].fan_in();
        let mut nodes = Vec::with_capacity(2 * self.layers.len());
        let mut input_qp = self.input_qparams;
        for layer in &self.layers {
            let q = layer.quantized_weights()?;
            let w = QTensor::new(vec![layer.outputs(), layer.fan_in()], q.codes.iter().copied().collect(), q.qparams)?;
            nodes.push(Node::Linear(fc_node(w, layer.bias.to_vec(), input_qp)));
            let mut steps = Vec::new();
            if let Some(bn) = &layer.bn {
                steps.push(ChainStep::BatchNorm(to_ir_batch_norm(bn)));
            }
            if let Some(act) = layer.act {
                steps.push(ChainStep::Quant(act));
                input_qp = act;
            }
            nodes.push(Node::Chain(UnivariateChain::new(steps)));
        }
        let mut g = GraphIR::new(InputSpec { shape: vec![features], qparams: Some(self.input_qparams) }, nodes);
        g.metadata = metadata;
        Ok(g)
    }
}

/// Lowest index of the maximum.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        loss += sum.ln() + m - row[y];
        for (j, (gj, &v)) in g.iter_mut().zip(row.iter()).enumerate() {
            *gj = ((v - m).exp() / sum - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    /// Fake-quantized network in eval mode.
    pub test_accuracy: f64,
    pub max_active_connections: usize,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub graph: GraphIR,
    pub network: Network,
    /// Accuracy of the exported integer graph on the test split.
    pub test_accuracy: f64,
    pub history: Vec<EpochMetrics>,
    pub warnings: Vec<String>,
}

struct Velocity {
    weights: Array2<f64>,
    bias: Array1<f64>,
    gamma: Option<Array1<f64>>,
    beta: Option<Array1<f64>>,
}

fn check_split(split: &Split, features: usize, classes: usize, name: &str) -> Result<(), TrainError> {
    let bad = |m: String| Err(TrainError::Dataset(format!("{name} split: {m}")));
    if split.is_empty() {
        return bad("empty".into());
    }
    if split.images.nrows() != split.labels.len() {
        return bad(format!("{} images but {} labels", split.images.nrows(), split.labels.len()));
    }
    if split.images.ncols() != features {
        return bad(format!("{} features, network expects {features}", split.images.ncols()));
    }
    if let Some(&y) = split.labels.iter().find(|&&y| y >= classes) {
        return bad(format!("label {y} out of range for {classes} classes"));
    }
    Ok(())
}

/// Accuracy of an integer graph on a split, by exact reference evaluation.
pub fn graph_accuracy(graph: &GraphIR, split: &Split) -> Result<f64, TrainError> {
    let rows: Vec<_> = split.images.rows().into_iter().collect();
    let hits = par::map_slice(&rows, |_, row| -> Result<usize, TrainError> {
        let x = graph.quantize_input(row.as_slice().expect("standard layout")).map_err(TrainError::Quant)?;
        let out = reference_eval(graph, &x).map_err(|e| TrainError::Export(e.to_string()))?;
        Ok(out.argmax())
    });
    let mut correct = 0usize;
    for (h, &y) in hits.into_iter().zip(&split.labels) {
        if h? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

pub fn train(config: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<Trained, TrainError> {
    config.validate()?;
    let features = config.layers[0];
    let classes = *config.layers.last().expect("validated");
    check_split(&data.train, features, classes, "train")?;
    check_split(&data.test, features, classes, "test")?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = Network::init(config, &mut rng)?;
    let n_train = config.train_limit.map_or(data.train.len(), |l| l.min(data.train.len()));
    let x_train = net.quantize_inputs(data.train.images.slice(s![..n_train, ..]))?;
    let y_train = &data.train.labels[..n_train];
    let x_test = net.quantize_inputs(data.test.images.view())?;

    let mut velocity: Vec<Velocity> = net
        .layers
        .iter()
        .map(|l| Velocity {
            weights: Array2::zeros(l.weights.raw_dim()),
            bias: Array1::zeros(l.outputs()),
            gamma: l.bn.as_ref().map(|b| Array1::zeros(b.gamma.len())),
            beta: l.bn.as_ref().map(|b| Array1::zeros(b.beta.len())),
        })
        .collect();

    let mut warnings = Vec::new();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 0..config.epochs {
        if epoch >= config.pruning_start_epoch || epoch + 1 == config.epochs {
            for (l, layer) in net.layers.iter_mut().enumerate() {
                if let Some(w) = prune_l1(layer, config.active_connections_cap) {
                    if epoch + 1 == config.epochs {
                        warnings.push(format!("layer {l}: {w}"));
                    }
                }
            }
        }
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let xb = x_train.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| y_train[i]).collect();
            let (logits, caches) = net.forward(xb.view(), ForwardMode::TRAIN)?;
            let (loss, grad) = softmax_cross_entropy(logits.view(), &yb);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, batch, loss });
            }
            loss_sum += loss * idx.len() as f64;
            correct += logits.rows().into_iter().zip(&yb).filter(|(r, &y)| argmax(r.iter().copied()) == y).count();
            let grads = net.backward(grad.view(), &caches);
            for ((layer, (g, cache)), v) in net.layers.iter_mut().zip(grads.iter().zip(&caches)).zip(&mut velocity) {
                sgd_step(layer, g, v, lr, config);
                if let (Some(bn), Some((mean, var))) = (&mut layer.bn, &cache.batch_stats) {
                    let m = config.bn_momentum;
                    let n = idx.len() as f64;
                    bn.running_mean = &bn.running_mean * (1.0 - m) + mean * m;
                    bn.running_var = &bn.running_var * (1.0 - m) + &(var * (n / (n - 1.0) * m));
                }
            }
        }
        let metrics = EpochMetrics {
            epoch,
            learning_rate: lr,
            loss: loss_sum / n_train as f64,
            train_accuracy: correct as f64 / n_train as f64,
            test_accuracy: net.accuracy(x_test.view(), &data.test.labels)?,
            max_active_connections: net.layers.iter().flat_map(|l| l.active_connections()).max().unwrap_or(0),
        };
        on_epoch(&metrics);
        history.push(metrics);
    }

    let mut metadata = BTreeMap::new();
    metadata.insert("source".into(), "train".into());
    metadata.insert("config".into(), serde_json::to_string(config).expect("config serializes"));
    metadata.insert("seed".into(), config.seed.to_string());
    let mut graph = net.export(metadata)?;
    let test_accuracy = graph_accuracy(&graph, &data.test)?;
    graph.metadata.insert("test_accuracy".into(), format!("{test_accuracy:.6}"));
    Ok(Trained { graph, network: net, test_accuracy, history, warnings })
}

fn sgd_step(layer: &mut FakeQuantLayer, g: &LayerGrads, v: &mut Velocity, lr: f64, config: &TrainConfig) {
    let (mu, wd) = (config.momentum, config.weight_decay);
    Zip::from(&mut layer.weights).and(&mut v.weights).and(&g.weights).and(&layer.mask).for_each(|w, v, &g, &m| {
        *v = m * (mu * *v + g + wd * *w);
        *w -= lr * *v;
    });
    Zip::from(&mut layer.bias).and(&mut v.bias).and(&g.bias).for_each(|b, v, &g| {
        *v = mu * *v + g;
        *b -= lr * *v;
    });
    if let Some(bn) = &mut layer.bn {
        for (p, v, g) in [(&mut bn.gamma, &mut v.gamma, &g.gamma), (&mut bn.beta, &mut v.beta, &g.beta)] {
            if let (Some(v), Some(g)) = (v.as_mut(), g.as_ref()) {
                Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
                    *v = mu * *v + g;
                    *p -= lr * *v;
                });
            }
        }
    }
}
