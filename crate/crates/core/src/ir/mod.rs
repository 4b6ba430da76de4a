//! Sequential graph IR: linear nodes (fc, conv, avgpool) alternating with
//! univariate chains that end in a quantizer.

mod format;
mod import;

pub use format::{load_model, model_from_bytes, model_to_bytes, save_model, FormatError, MODEL_MAGIC, MODEL_VERSION};
pub use import::{import_float_model, FloatLayer, FloatLinear, FloatModel, ImportError, ImportOptions};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::quant::{quantize, QTensor, QuantError, QuantParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        window_output(h, self.kernel_h, self.stride, self.padding)
            .zip(window_output(w, self.kernel_w, self.stride, self.padding))
    }
}

fn window_output(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinearOp {
    FullyConnected { in_features: usize, out_features: usize },
    Conv2d(Conv2dGeometry),
    /// Square window without padding. The accumulator is the plain sum of the
    /// window; the `1/window²` factor is part of the accumulator scale.
    AvgPool2d { window: usize, stride: usize },
}

impl LinearOp {
    pub fn name(&self) -> &'static str {
        match self {
            LinearOp::FullyConnected { .. } => "fc",
            LinearOp::Conv2d(_) => "conv2d",
            LinearOp::AvgPool2d { .. } => "avgpool2d",
        }
    }

    /// Output shape for a given input shape, or `None` if incompatible.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LinearOp::FullyConnected { in_features, out_features } => {
                (input.iter().product::<usize>() == in_features).then(|| vec![out_features])
            }
            LinearOp::Conv2d(g) => match *input {
                [c, h, w] if c == g.in_channels => g.output_hw(h, w).map(|(oh, ow)| vec![g.out_channels, oh, ow]),
                _ => None,
            },
            LinearOp::AvgPool2d { window, stride } => match *input {
                [c, h, w] => window_output(h, window, stride, 0)
                    .zip(window_output(w, window, stride, 0))
                    .map(|(oh, ow)| vec![c, oh, ow]),
                _ => None,
            },
        }
    }

    pub fn expected_weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LinearOp::FullyConnected { in_features, out_features } => Some(vec![out_features, in_features]),
            LinearOp::Conv2d(g) => Some(vec![g.out_channels, g.in_channels, g.kernel_h, g.kernel_w]),
            LinearOp::AvgPool2d { .. } => None,
        }
    }
}

/// Number of output channels implied by an output shape: the leading dim for
/// CHW tensors, every element for vectors.
pub fn channel_count(output_shape: &[usize]) -> usize {
    output_shape.first().copied().unwrap_or(1)
}

/// Channel of a flat output index.
pub fn channel_of(output_shape: &[usize], index: usize) -> usize {
    let per_channel: usize = output_shape.iter().skip(1).product();
    index / per_channel.max(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearNode {
    pub op: LinearOp,
    /// `[out, in]` for fc, `[out_c, in_c, kh, kw]` for conv, absent for pooling.
    pub weights: Option<QTensor>,
    /// Per output channel; applied inside the univariate function, never to
    /// the integer accumulator.
    pub bias: Vec<f64>,
    pub input_qparams: Option<QuantParams>,
}

impl LinearNode {
    /// Real value represented by one unit of the accumulator: `S_x * S_w`.
    pub fn accumulator_scale(&self) -> Option<f64> {
        let sx = self.input_qparams?.scale();
        match self.op {
            LinearOp::AvgPool2d { window, .. } => Some(sx / (window * window) as f64),
            _ => Some(sx * self.weights.as_ref()?.qparams().scale()),
        }
    }

    /// `S_x S_w Σ + b_k`, the real value entering the univariate chain.
    pub fn real_output(&self, channel: usize, acc: i64) -> f64 {
        let scale = self.accumulator_scale().expect("validated node has scales");
        affine_input(scale, self.bias[channel], acc)
    }
}

/// `scale * acc + bias` in double precision; the single expression shared by
/// every evaluator so fused tables and clear evaluation agree bit for bit.
pub fn affine_input(scale: f64, bias: f64, acc: i64) -> f64 {
    scale * acc as f64 + bias
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn pick(v: &[f64], channel: usize) -> f64 {
        if v.len() == 1 {
            v[0]
        } else {
            v[channel]
        }
    }

    pub fn apply(&self, channel: usize, x: f64) -> f64 {
        let g = Self::pick(&self.gamma, channel);
        let b = Self::pick(&self.beta, channel);
        let m = Self::pick(&self.running_mean, channel);
        let v = Self::pick(&self.running_var, channel);
        g * (x - m) / (v + self.epsilon).sqrt() + b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    /// `clip(x / 6 + 1/2, 0, 1)`.
    HardSigmoid,
    HardTanh { min_val: f64, max_val: f64 },
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::HardSigmoid => (x / 6.0 + 0.5).clamp(0.0, 1.0),
            Activation::HardTanh { min_val, max_val } => x.clamp(min_val, max_val),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum ChainStep {
    /// Reinterprets an integer-valued input as a code: `S (v - Z)`.
    Dequant(QuantParams),
    BatchNorm(BatchNorm),
    Activation(Activation),
    AffineRescale { multiplier: f64, offset: f64 },
    Quant(QuantParams),
}

/// Ordered list of per-element real functions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnivariateChain {
    pub steps: Vec<ChainStep>,
}

impl UnivariateChain {
    pub fn new(steps: Vec<ChainStep>) -> Self {
        Self { steps }
    }

    /// Quantizer the chain ends in, if any.
    pub fn output_quant(&self) -> Option<&QuantParams> {
        match self.steps.last() {
            Some(ChainStep::Quant(p)) => Some(p),
            _ => None,
        }
    }

    fn contains_quant(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, ChainStep::Quant(_)))
    }

    /// Whether parameters vary across channels.
    pub fn is_per_channel(&self) -> bool {
        self.steps.iter().any(|s| matches!(s, ChainStep::BatchNorm(bn) if bn.channels() > 1))
    }

    /// Evaluates every step in double precision. Quant steps produce the code
    /// as an integer-valued real.
    pub fn apply(&self, channel: usize, x: f64) -> Result<f64, QuantError> {
        let mut v = x;
        for step in &self.steps {
            v = match step {
                ChainStep::Dequant(p) => p.scale() * (v - p.zero_point() as f64),
                ChainStep::BatchNorm(bn) => bn.apply(channel, v),
                ChainStep::Activation(a) => a.apply(v),
                ChainStep::AffineRescale { multiplier, offset } => multiplier * v + offset,
                ChainStep::Quant(p) => quantize(v, p)? as f64,
            };
        }
        Ok(v)
    }

    /// Splits into the prefix ending at the last `Quant` (the part a table
    /// lookup can absorb) and the remainder evaluated in the clear.
    pub fn split_at_last_quant(&self) -> (Option<UnivariateChain>, UnivariateChain) {
        match self.steps.iter().rposition(|s| matches!(s, ChainStep::Quant(_))) {
            Some(k) => (
                Some(UnivariateChain::new(self.steps[..=k].to_vec())),
                UnivariateChain::new(self.steps[k + 1..].to_vec()),
            ),
            None => (None, self.clone()),
        }
    }
}

/// Final value of the layer for one element: the chain applied to
/// `S_x S_w Σ + b`. Shared by table construction and reference evaluation.
pub fn univariate_value(linear: &LinearNode, chain: &UnivariateChain, channel: usize, acc: i64) -> Result<f64, QuantError> {
    chain.apply(channel, linear.real_output(channel, acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    /// Quantizer applied to raw inputs before encryption.
    pub qparams: Option<QuantParams>,
}

impl InputSpec {
    /// Floor-quantizes real input values with the input quantizer.
    pub fn quantize(&self, values: &[f64]) -> Result<QTensor, QuantError> {
        let p = self.qparams.ok_or(QuantError::EmptyCalibration)?;
        QTensor::quantize(self.shape.clone(), values, p, crate::quant::Rounding::Floor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Linear(LinearNode),
    Chain(UnivariateChain),
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputKind {
    Codes(QuantParams),
    Real,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub shape: Vec<usize>,
    pub kind: OutputKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphIR {
    pub input: InputSpec,
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A linear node together with the chain consuming its output.
#[derive(Debug, Clone)]
pub struct Layer<'a> {
    /// Index of the linear node in [`GraphIR::nodes`].
    pub index: usize,
    pub linear: &'a LinearNode,
    pub chain: &'a UnivariateChain,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub terminal: bool,
}

impl Layer<'_> {
    pub fn channels(&self) -> usize {
        channel_count(&self.output_shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    EmptyGraph,
    UnquantizedInput,
    InputParamsMismatch,
    MissingChain,
    OrphanChain,
    ChainNotQuantized,
    ShapeFlow,
    WeightShape,
    MissingWeights,
    UnexpectedWeights,
    BiasLength,
    ChannelParams,
    InvalidParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub node: usize,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl GraphIR {
    pub fn new(input: InputSpec, nodes: Vec<Node>) -> Self {
        Self { input, nodes, metadata: BTreeMap::new() }
    }

    /// Shapes flowing out of each node (`None` once the flow breaks).
    pub fn node_output_shapes(&self) -> Vec<Option<Vec<usize>>> {
        let mut current = Some(self.input.shape.clone());
        self.nodes
            .iter()
            .map(|n| {
                if let (Node::Linear(l), Some(shape)) = (n, &current) {
                    current = l.op.output_shape(shape);
                }
                current.clone()
            })
            .collect()
    }

    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut push = |node: usize, rule: Rule, message: String| diags.push(Diagnostic { node, rule, message });

        if self.nodes.is_empty() {
            push(0, Rule::EmptyGraph, "graph has no nodes".into());
            return diags;
        }
        if let Some(p) = &self.input.qparams {
            if let Err(e) = p.validate() {
                push(0, Rule::InvalidParams, format!("invalid input quantizer: {e}"));
            }
        }

        let mut shape = Some(self.input.shape.clone());
        // Quantizer of the integers flowing into the next linear node.
        let mut upstream: Option<QuantParams> = self.input.qparams;
        let mut prev_linear: Option<usize> = None;
        let mut channels = 0usize;
        let last = self.nodes.len() - 1;

        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Linear(l) => {
                    if let Some(p) = prev_linear.take() {
                        push(p, Rule::MissingChain, format!("missing univariate chain between node {p} and node {i}"));
                        upstream = None;
                    }
                    match (&l.input_qparams, &upstream) {
                        (None, _) => push(i, Rule::UnquantizedInput, format!("unquantized linear input at node {i}")),
                        (Some(_), None) => push(i, Rule::UnquantizedInput, format!("unquantized linear input at node {i}")),
                        (Some(a), Some(b)) if a != b => push(
                            i,
                            Rule::InputParamsMismatch,
                            format!("input quantizer of node {i} differs from the quantizer producing its input"),
                        ),
                        _ => {}
                    }
                    if let Some(p) = &l.input_qparams {
                        if let Err(e) = p.validate() {
                            push(i, Rule::InvalidParams, format!("invalid input quantizer at node {i}: {e}"));
                        }
                    }
                    match (l.op.expected_weight_shape(), &l.weights) {
                        (Some(_), None) => push(i, Rule::MissingWeights, format!("{} node {i} has no weights", l.op.name())),
                        (None, Some(_)) => push(i, Rule::UnexpectedWeights, format!("pooling node {i} must not carry weights")),
                        (Some(expected), Some(w)) => {
                            if w.shape() != expected.as_slice() {
                                push(i, Rule::WeightShape, format!("weights of node {i} have shape {:?}, expected {expected:?}", w.shape()));
                            }
                            if let Err(e) = w.validate() {
                                push(i, Rule::InvalidParams, format!("weights of node {i}: {e}"));
                            }
                        }
                        (None, None) => {}
                    }
                    let out = shape.as_ref().and_then(|s| l.op.output_shape(s));
                    match &out {
                        None => {
                            if shape.is_some() {
                                push(i, Rule::ShapeFlow, format!("node {i} cannot consume input of shape {:?}", shape.as_ref().unwrap()));
                            }
                        }
                        Some(o) => {
                            channels = channel_count(o);
                            if l.bias.len() != channels {
                                push(i, Rule::BiasLength, format!("bias of node {i} has length {}, expected {channels}", l.bias.len()));
                            }
                            if l.bias.iter().any(|b| !b.is_finite()) {
                                push(i, Rule::InvalidParams, format!("non-finite bias at node {i}"));
                            }
                        }
                    }
                    shape = out;
                    prev_linear = Some(i);
                    upstream = None;
                }
                Node::Chain(c) => {
                    if prev_linear.take().is_none() {
                        push(i, Rule::OrphanChain, format!("univariate chain at node {i} does not follow a linear node"));
                    }
                    for step in &c.steps {
                        check_step(i, step, channels, &mut push);
                    }
                    let terminal = i == last;
                    if !terminal && c.output_quant().is_none() {
                        push(i, Rule::ChainNotQuantized, format!("univariate chain at node {i} must end with a quantizer"));
                    }
                    if terminal && c.contains_quant() && c.output_quant().is_none()
                        && !matches!(c.steps.last(), Some(ChainStep::Dequant(_)))
                    {
                        push(i, Rule::ChainNotQuantized, format!("terminal chain at node {i} must end with Quant or Dequant"));
                    }
                    upstream = c.output_quant().copied();
                }
            }
        }
        if let Some(p) = prev_linear {
            push(p, Rule::MissingChain, format!("missing univariate chain after node {p}"));
        }
        diags
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Pairs every linear node with its chain. Requires a valid graph.
    pub fn layers(&self) -> Vec<Layer<'_>> {
        let shapes = self.node_output_shapes();
        let mut input_shape = self.input.shape.clone();
        let mut out = Vec::new();
        for (i, pair) in self.nodes.windows(2).enumerate() {
            if let [Node::Linear(linear), Node::Chain(chain)] = pair {
                let output_shape = shapes[i].clone().expect("valid graph has consistent shapes");
                out.push(Layer {
                    index: i,
                    linear,
                    chain,
                    input_shape: std::mem::replace(&mut input_shape, output_shape.clone()),
                    output_shape,
                    terminal: i + 2 == self.nodes.len(),
                });
            }
        }
        out
    }

    pub fn output_spec(&self) -> Option<OutputSpec> {
        let shape = self.node_output_shapes().last()?.clone()?;
        let kind = match self.nodes.last()? {
            Node::Chain(c) => c.output_quant().map_or(OutputKind::Real, |p| OutputKind::Codes(*p)),
            Node::Linear(_) => return None,
        };
        Some(OutputSpec { shape, kind })
    }

    /// Quantizes a real input with the graph's input quantizer.
    pub fn quantize_input(&self, values: &[f64]) -> Result<QTensor, QuantError> {
        self.input.quantize(values)
    }
}

fn check_step(i: usize, step: &ChainStep, channels: usize, push: &mut impl FnMut(usize, Rule, String)) {
    match step {
        ChainStep::Quant(p) | ChainStep::Dequant(p) => {
            if let Err(e) = p.validate() {
                push(i, Rule::InvalidParams, format!("invalid quantizer in chain at node {i}: {e}"));
            }
        }
        ChainStep::BatchNorm(bn) => {
            let lens = [bn.gamma.len(), bn.beta.len(), bn.running_mean.len(), bn.running_var.len()];
            if lens.iter().any(|&n| n != lens[0]) || !(lens[0] == 1 || lens[0] == channels) {
                push(i, Rule::ChannelParams, format!("batch-norm at node {i} has parameter lengths {lens:?}, expected 1 or {channels}"));
            }
            let finite = bn.gamma.iter().chain(&bn.beta).chain(&bn.running_mean).chain(&bn.running_var).all(|v| v.is_finite());
            if !finite || bn.running_var.iter().any(|&v| v + bn.epsilon <= 0.0) {
                push(i, Rule::InvalidParams, format!("batch-norm at node {i} has invalid statistics"));
            }
        }
        ChainStep::AffineRescale { multiplier, offset } => {
            if !(multiplier.is_finite() && offset.is_finite()) {
                push(i, Rule::InvalidParams, format!("non-finite rescale at node {i}"));
            }
        }
        ChainStep::Activation(Activation::HardTanh { min_val, max_val }) => {
            if !(min_val <= max_val) {
                push(i, Rule::InvalidParams, format!("hard-tanh bounds inverted at node {i}"));
            }
        }
        ChainStep::Activation(_) => {}
    }
}

/// Convenience for building fc layers from integer codes.
pub fn fc_node(weights: QTensor, bias: Vec<f64>, input_qparams: QuantParams) -> LinearNode {
    let (out_features, in_features) = (weights.shape()[0], weights.shape()[1]);
    LinearNode {
        op: LinearOp::FullyConnected { in_features, out_features },
        weights: Some(weights),
        bias,
        input_qparams: Some(input_qparams),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::quant::RangeMode;

    fn p2() -> QuantParams {
        QuantParams::new(0.5, -1, 2, RangeMode::Narrow).unwrap()
    }

    fn wq(out: usize, inp: usize) -> QTensor {
        let data = (0..out * inp).map(|i| (i % 3) as i32 - 1).collect();
        QTensor::new(vec![out, inp], data, QuantParams::symmetric(0.1, 2, RangeMode::Narrow).unwrap()).unwrap()
    }

    fn quant_chain() -> Node {
        Node::Chain(UnivariateChain::new(vec![ChainStep::Activation(Activation::Relu), ChainStep::Quant(p2())]))
    }

    pub(crate) fn three_layer() -> GraphIR {
        let input = InputSpec { shape: vec![6], qparams: Some(p2()) };
        GraphIR::new(
            input,
            vec![
                Node::Linear(fc_node(wq(4, 6), vec![0.0; 4], p2())),
                quant_chain(),
                Node::Linear(fc_node(wq(4, 4), vec![0.1; 4], p2())),
                quant_chain(),
                Node::Linear(fc_node(wq(3, 4), vec![0.0; 3], p2())),
                Node::Chain(UnivariateChain::default()),
            ],
        )
    }

    #[test]
    fn well_formed_graph_has_no_diagnostics() {
        let g = three_layer();
        assert_eq!(g.validate(), vec![]);
        assert_eq!(g.layers().len(), 3);
        assert_eq!(g.output_spec().unwrap(), OutputSpec { shape: vec![3], kind: OutputKind::Real });
    }

    #[test]
    fn unquantized_input_is_reported() {
        let mut g = three_layer();
        if let Node::Linear(l) = &mut g.nodes[2] {
            l.input_qparams = None;
        }
        let d = g.validate();
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].to_string(), "unquantized linear input at node 2");
    }

    #[test]
    fn consecutive_linear_nodes_need_a_chain() {
        let mut g = three_layer();
        g.nodes.remove(1);
        let d = g.validate();
        assert!(d.iter().any(|d| d.rule == Rule::MissingChain && d.message.starts_with("missing univariate chain")), "{d:?}");
    }

    #[test]
    fn structural_errors() {
        let mut g = three_layer();
        g.nodes[1] = Node::Chain(UnivariateChain::new(vec![ChainStep::Activation(Activation::Relu)]));
        assert!(g.validate().iter().any(|d| d.rule == Rule::ChainNotQuantized));

        let mut g = three_layer();
        if let Node::Linear(l) = &mut g.nodes[0] {
            l.bias.pop();
        }
        assert!(g.validate().iter().any(|d| d.rule == Rule::BiasLength));

        let mut g = three_layer();
        g.input.shape = vec![5];
        assert!(g.validate().iter().any(|d| d.rule == Rule::ShapeFlow));

        let mut g = three_layer();
        g.nodes.pop();
        assert!(g.validate().iter().any(|d| d.rule == Rule::MissingChain));

        let mut g = three_layer();
        g.nodes.insert(0, quant_chain());
        assert!(g.validate().iter().any(|d| d.rule == Rule::OrphanChain));

        let g = GraphIR::new(InputSpec { shape: vec![1], qparams: None }, vec![]);
        assert_eq!(g.validate()[0].rule, Rule::EmptyGraph);
    }

    #[test]
    fn mismatched_input_quantizer() {
        let mut g = three_layer();
        if let Node::Linear(l) = &mut g.nodes[2] {
            l.input_qparams = Some(QuantParams::new(0.25, -1, 2, RangeMode::Narrow).unwrap());
        }
        assert!(g.validate().iter().any(|d| d.rule == Rule::InputParamsMismatch));
    }

    #[test]
    fn conv_and_pool_shapes() {
        let g = Conv2dGeometry { in_channels: 1, out_channels: 4, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 };
        assert_eq!(LinearOp::Conv2d(g).output_shape(&[1, 8, 8]), Some(vec![4, 8, 8]));
        assert_eq!(LinearOp::Conv2d(g).output_shape(&[2, 8, 8]), None);
        assert_eq!(LinearOp::AvgPool2d { window: 2, stride: 2 }.output_shape(&[4, 8, 8]), Some(vec![4, 4, 4]));
        assert_eq!(LinearOp::AvgPool2d { window: 3, stride: 2 }.output_shape(&[4, 2, 2]), None);
        assert_eq!(channel_of(&[4, 8, 8], 70), 1);
        assert_eq!(channel_of(&[10], 7), 7);
    }

    #[test]
    fn chain_semantics() {
        let bn = BatchNorm { gamma: vec![2.0], beta: vec![1.0], running_mean: vec![0.5], running_var: vec![3.0], epsilon: 1.0 };
        let c = UnivariateChain::new(vec![
            ChainStep::BatchNorm(bn),
            ChainStep::Activation(Activation::HardTanh { min_val: 0.0, max_val: 1.0 }),
            ChainStep::Quant(p2()),
        ]);
        // 2 * (0.5 - 0.5) / 2 + 1 = 1 -> clip 1 -> floor(2) - 1 = 1
        assert_eq!(c.apply(0, 0.5).unwrap(), 1.0);
        assert_eq!(c.apply(0, -10.0).unwrap(), -1.0);
        assert_eq!(Activation::HardSigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::HardSigmoid.apply(9.0), 1.0);
    }
}
