//! Lowering of a [`GraphIR`] to an integer-only circuit: zero-point-corrected
//! dot products followed by lookup tables that absorb everything univariate
//! (`S_x S_w Σ + b`, the chain, and the output quantizer).

mod format;

pub use format::{circuit_from_bytes, circuit_to_bytes, load_circuit, save_circuit, CircuitFormatError, CIRCUIT_MAGIC, CIRCUIT_VERSION};

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{signed_bits, worst_case_interval, AnalysisReport};
use crate::crt::CrtBasis;
use crate::eval::{EvalError, OutOfDomainPolicy};
use crate::ir::{affine_input, channel_count, Diagnostic, GraphIR, InputSpec, LinearOp, UnivariateChain};
use crate::quant::{QTensor, QuantError, QuantParams};
use crate::reference::reference_eval_traced;

pub const MAX_CIRCUIT_BITS: u32 = 16;
pub const NATIVE_MAX_BITS: u32 = 8;
pub const DEFAULT_MARGIN: f64 = 0.2;
pub const MAX_TABLE_ENTRIES: u64 = 1 << MAX_CIRCUIT_BITS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("chain does not end in a quantizer")]
    NotQuantized,
    #[error("empty table domain [{lo}, {hi}]")]
    EmptyDomain { lo: i64, hi: i64 },
    #[error("accumulator too wide: domain [{lo}, {hi}] needs {bits} bits, above the {MAX_CIRCUIT_BITS}-bit limit")]
    AccumulatorTooWide { lo: i64, hi: i64, bits: u32 },
    #[error("{0} bias values for {1} channels")]
    BiasLength(usize, usize),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CompileError {
    #[error("graph does not validate: {}", .0.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("measured mode needs a non-empty calibration set")]
    EmptyCalibration,
    #[error("node {node}: {source}")]
    Fusion { node: usize, source: FusionError },
    #[error("calibration sample {sample}: {source}")]
    Calibration { sample: usize, source: EvalError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// One ciphertext, at most 8 bits.
    Native,
    /// Residues over the circuit's CRT basis, 9 to 16 bits.
    Crt,
}

impl Encoding {
    pub fn for_bits(bits: u32) -> Option<Encoding> {
        match bits {
            0..=NATIVE_MAX_BITS => Some(Encoding::Native),
            9..=MAX_CIRCUIT_BITS => Some(Encoding::Crt),
            _ => None,
        }
    }
}

/// Sparse view of a linear op: for every output, the inputs it reads and the
/// corrected weight of each connection. Zero weights are dropped.
#[derive(Debug, Clone, Default, PartialEq)]
struct Connections {
    offsets: Vec<usize>,
    inputs: Vec<u32>,
    weights: Vec<i32>,
}

impl Connections {
    fn build(op: &LinearOp, input_shape: &[usize], output_shape: &[usize], weights: &[i32]) -> Self {
        let mut c = Connections { offsets: vec![0], ..Default::default() };
        let push = |c: &mut Connections, input: usize, w: i32| {
            if w != 0 {
                c.inputs.push(input as u32);
                c.weights.push(w);
            }
        };
        match *op {
            LinearOp::FullyConnected { in_features, out_features } => {
                for row in weights.chunks_exact(in_features).take(out_features) {
                    for (i, &w) in row.iter().enumerate() {
                        push(&mut c, i, w);
                    }
                    c.offsets.push(c.inputs.len());
                }
            }
            LinearOp::Conv2d(g) => {
                let (h, w_in) = (input_shape[1] as isize, input_shape[2] as isize);
                let (oh, ow) = (output_shape[1], output_shape[2]);
                let kernel = g.in_channels * g.kernel_h * g.kernel_w;
                for co in 0..g.out_channels {
                    let filter = &weights[co * kernel..(co + 1) * kernel];
                    for pos in 0..oh * ow {
                        let top = (pos / ow * g.stride) as isize - g.padding as isize;
                        let left = (pos % ow * g.stride) as isize - g.padding as isize;
                        for (k, &w) in filter.iter().enumerate() {
                            let ci = k / (g.kernel_h * g.kernel_w);
                            let iy = top + ((k / g.kernel_w) % g.kernel_h) as isize;
                            let ix = left + (k % g.kernel_w) as isize;
                            if (0..h).contains(&iy) && (0..w_in).contains(&ix) {
                                push(&mut c, (ci as isize * h * w_in + iy * w_in + ix) as usize, w);
                            }
                        }
                        c.offsets.push(c.inputs.len());
                    }
                }
            }
            LinearOp::AvgPool2d { window, stride } => {
                let (h, w_in) = (input_shape[1], input_shape[2]);
                let (oh, ow) = (output_shape[1], output_shape[2]);
                for o in 0..output_shape[0] * oh * ow {
                    let (ch, pos) = (o / (oh * ow), o % (oh * ow));
                    let (top, left) = (pos / ow * stride, pos % ow * stride);
                    for dy in 0..window {
                        for dx in 0..window {
                            push(&mut c, ch * h * w_in + (top + dy) * w_in + left + dx, 1);
                        }
                    }
                    c.offsets.push(c.inputs.len());
                }
            }
        }
        c
    }
}

/// `Σ_i (q_x^i - Z_x)(q_w^{(i,k)} - Z_w)` for every output `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DotAccNode {
    pub op: LinearOp,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub input_qparams: QuantParams,
    pub weight_qparams: Option<QuantParams>,
    /// Zero-point-corrected codes `q_w - Z_w`, laid out like the source tensor.
    pub weights: Vec<i32>,
    connections: Connections,
}

impl DotAccNode {
    pub fn new(op: LinearOp, input_shape: Vec<usize>, input_qparams: QuantParams, weights: Option<&QTensor>) -> Self {
        let output_shape = op.output_shape(&input_shape).expect("shape checked by validation");
        let (weight_qparams, corrected) = match weights {
            Some(w) => {
                let zw = w.qparams().zero_point();
                (Some(*w.qparams()), w.data().iter().map(|&q| q - zw).collect())
            }
            None => (None, Vec::new()),
        };
        Self::from_parts(op, input_shape, output_shape, input_qparams, weight_qparams, corrected)
    }

    pub(crate) fn from_parts(
        op: LinearOp,
        input_shape: Vec<usize>,
        output_shape: Vec<usize>,
        input_qparams: QuantParams,
        weight_qparams: Option<QuantParams>,
        weights: Vec<i32>,
    ) -> Self {
        let connections = Connections::build(&op, &input_shape, &output_shape, &weights);
        Self { op, input_shape, output_shape, input_qparams, weight_qparams, weights, connections }
    }

    pub fn outputs(&self) -> usize {
        self.connections.offsets.len() - 1
    }

    pub fn inputs(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn channels(&self) -> usize {
        channel_count(&self.output_shape)
    }

    /// Nonzero connections feeding output `k` as `(input index, weight)`.
    pub fn connections_of(&self, k: usize) -> impl Iterator<Item = (usize, i32)> + '_ {
        let (a, b) = (self.connections.offsets[k], self.connections.offsets[k + 1]);
        self.connections.inputs[a..b].iter().zip(&self.connections.weights[a..b]).map(|(&i, &w)| (i as usize, w))
    }

    pub fn active_connections(&self) -> Vec<usize> {
        self.connections.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Codes after subtracting `Z_x`, i.e. the values entering the products.
    pub fn centered_input_range(&self) -> (i64, i64) {
        self.input_qparams.centered_range()
    }

    pub fn accumulate(&self, codes: &[i32]) -> Vec<i64> {
        let zx = self.input_qparams.zero_point();
        let centered: Vec<i64> = codes.iter().map(|&q| (q - zx) as i64).collect();
        self.accumulate_centered(&centered)
    }

    pub fn accumulate_centered(&self, x: &[i64]) -> Vec<i64> {
        let c = &self.connections;
        c.offsets
            .windows(2)
            .map(|r| c.inputs[r[0]..r[1]].iter().zip(&c.weights[r[0]..r[1]]).map(|(&i, &w)| x[i as usize] * w as i64).sum())
            .collect()
    }
}

/// `f(q) = S_x S_w q + b_k`, the real value a table entry starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFunction {
    pub scale: f64,
    pub bias: Vec<f64>,
}

impl FusedFunction {
    pub fn value(&self, channel: usize, acc: i64) -> f64 {
        affine_input(self.scale, self.bias[channel], acc)
    }

    fn is_uniform(&self) -> bool {
        self.bias.iter().all(|&b| b.to_bits() == self.bias[0].to_bits())
    }
}

/// Materialized univariate function over an accumulator interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TluNode {
    pub domain_lo: i64,
    pub domain_hi: i64,
    pub output_qparams: QuantParams,
    pub per_channel: bool,
    /// Distinct tables; channels with identical tables share one entry.
    pub tables: Vec<Vec<i32>>,
    /// Table index for every logical table (one per channel when per-channel, else one).
    pub channel_table: Vec<u32>,
}

impl TluNode {
    pub fn table_count(&self) -> usize {
        self.channel_table.len()
    }

    pub fn table(&self, channel: usize) -> &[i32] {
        let logical = if self.per_channel { channel } else { 0 };
        &self.tables[self.channel_table[logical] as usize]
    }

    pub fn domain_len(&self) -> usize {
        (self.domain_hi - self.domain_lo + 1) as usize
    }

    /// `None` when `x` is outside the domain under the strict policy.
    pub fn lookup(&self, channel: usize, x: i64, policy: OutOfDomainPolicy) -> Option<i32> {
        let x = if (self.domain_lo..=self.domain_hi).contains(&x) {
            x
        } else {
            match policy {
                OutOfDomainPolicy::Strict => return None,
                OutOfDomainPolicy::Clamp => x.clamp(self.domain_lo, self.domain_hi),
            }
        };
        Some(self.table(channel)[(x - self.domain_lo) as usize])
    }
}

/// Builds the table `q -> Q(chain(f(q)))` for every `q` in `domain`.
pub fn fuse_chain(f: &FusedFunction, chain: &UnivariateChain, domain: (i64, i64), channels: usize) -> Result<TluNode, FusionError> {
    let output_qparams = *chain.output_quant().ok_or(FusionError::NotQuantized)?;
    let (lo, hi) = domain;
    if lo > hi {
        return Err(FusionError::EmptyDomain { lo, hi });
    }
    let bits = signed_bits(lo, hi);
    if bits > MAX_CIRCUIT_BITS || (hi - lo + 1) as u64 > MAX_TABLE_ENTRIES {
        return Err(FusionError::AccumulatorTooWide { lo, hi, bits });
    }
    if f.bias.len() != channels {
        return Err(FusionError::BiasLength(f.bias.len(), channels));
    }
    let per_channel = chain.is_per_channel() || !f.is_uniform();
    let logical = if per_channel { channels } else { 1 };
    let built = crate::par::map_indexed(logical, |c| {
        (lo..=hi).map(|q| chain.apply(c, f.value(c, q)).map(|v| v as i32)).collect::<Result<Vec<i32>, _>>()
    });

    let mut tables = Vec::new();
    let mut seen: HashMap<Vec<i32>, u32> = HashMap::new();
    let mut channel_table = Vec::with_capacity(logical);
    for t in built {
        let t = t?;
        let id = *seen.entry(t.clone()).or_insert_with(|| {
            tables.push(t);
            (tables.len() - 1) as u32
        });
        channel_table.push(id);
    }
    Ok(TluNode { domain_lo: lo, domain_hi: hi, output_qparams, per_channel, tables, channel_table })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DomainMode {
    /// Calibration min/max padded by `margin * range` on each side, rounded
    /// outward and clipped to the worst-case bound.
    Measured { margin: f64 },
    WorstCase,
}

impl Default for DomainMode {
    fn default() -> Self {
        DomainMode::Measured { margin: DEFAULT_MARGIN }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompileOptions {
    pub mode: DomainMode,
    pub basis: CrtBasis,
}

/// One lowered layer: a dot product, then either a table lookup or (for the
/// terminal layer only) real post-processing in the clear.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub dot: DotAccNode,
    pub f: FusedFunction,
    pub tlu: Option<TluNode>,
    /// Steps evaluated in the clear after decryption: the chain suffix after
    /// the last quantizer, or the whole chain when there is no table.
    pub clear: UnivariateChain,
    pub worst_case: (i64, i64),
    pub observed: Option<(i64, i64)>,
    /// Accumulator interval the ciphertext must hold: the table domain, or
    /// the sized interval for a table-less terminal layer.
    pub domain: (i64, i64),
    pub encoding: Encoding,
    /// Index of the source linear node in the graph.
    pub source_node: usize,
}

impl Stage {
    pub fn bits(&self) -> u32 {
        signed_bits(self.domain.0, self.domain.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledCircuit {
    pub input: InputSpec,
    pub stages: Vec<Stage>,
    pub basis: CrtBasis,
    pub mode: DomainMode,
    pub metadata: BTreeMap<String, String>,
    pub report: Option<AnalysisReport>,
}

impl CompiledCircuit {
    pub fn output_shape(&self) -> &[usize] {
        &self.stages.last().expect("circuit has stages").dot.output_shape
    }

    pub fn input_qparams(&self) -> QuantParams {
        self.input.qparams.expect("compiled graphs have quantized inputs")
    }

    pub fn tlu_count(&self) -> usize {
        self.stages.iter().filter(|s| s.tlu.is_some()).count()
    }
}

fn pad_domain(observed: (i64, i64), margin: f64, bound: (i64, i64)) -> (i64, i64) {
    let range = (observed.1 - observed.0) as f64;
    let pad = (margin * range).ceil() as i64;
    ((observed.0 - pad).max(bound.0), (observed.1 + pad).min(bound.1))
}

pub fn compile(graph: &GraphIR, calibration: &[QTensor], options: &CompileOptions) -> Result<CompiledCircuit, CompileError> {
    let diags = graph.validate();
    if !diags.is_empty() {
        return Err(CompileError::Invalid(diags));
    }
    let layers = graph.layers();

    let observed: Option<Vec<(i64, i64)>> = match options.mode {
        DomainMode::WorstCase => None,
        DomainMode::Measured { .. } => {
            if calibration.is_empty() {
                return Err(CompileError::EmptyCalibration);
            }
            let per_sample = crate::par::map_slice(calibration, |_, x| {
                reference_eval_traced(graph, x).map(|(_, t)| {
                    t.iter()
                        .map(|s| {
                            let lo = s.accumulators.iter().copied().min().unwrap_or(0);
                            let hi = s.accumulators.iter().copied().max().unwrap_or(0);
                            (lo, hi)
                        })
                        .collect::<Vec<_>>()
                })
            });
            let mut merged = vec![(i64::MAX, i64::MIN); layers.len()];
            for (sample, r) in per_sample.into_iter().enumerate() {
                let ranges = r.map_err(|source| CompileError::Calibration { sample, source })?;
                for (m, (lo, hi)) in merged.iter_mut().zip(ranges) {
                    *m = (m.0.min(lo), m.1.max(hi));
                }
            }
            Some(merged)
        }
    };

    let mut stages = Vec::with_capacity(layers.len());
    for (li, layer) in layers.iter().enumerate() {
        let lin = layer.linear;
        let node = layer.index;
        let fusion = |source| CompileError::Fusion { node, source };
        let dot = DotAccNode::new(lin.op, layer.input_shape.clone(), lin.input_qparams.expect("validated"), lin.weights.as_ref());
        let worst_case = worst_case_interval(&dot);
        let obs = observed.as_ref().map(|o| o[li]);
        let domain = match (options.mode, obs) {
            (DomainMode::Measured { margin }, Some(o)) => pad_domain(o, margin, worst_case),
            _ => worst_case,
        };
        let bits = signed_bits(domain.0, domain.1);
        let encoding = Encoding::for_bits(bits)
            .ok_or_else(|| fusion(FusionError::AccumulatorTooWide { lo: domain.0, hi: domain.1, bits }))?;
        let f = FusedFunction { scale: lin.accumulator_scale().expect("validated"), bias: lin.bias.clone() };
        let (prefix, suffix) = layer.chain.split_at_last_quant();
        let tlu = match &prefix {
            Some(p) => Some(fuse_chain(&f, p, domain, layer.channels()).map_err(fusion)?),
            None => None,
        };
        stages.push(Stage { dot, f, tlu, clear: suffix, worst_case, observed: obs, domain, encoding, source_node: node });
    }

    let mut metadata = graph.metadata.clone();
    metadata.insert("calibration_samples".into(), calibration.len().to_string());
    Ok(CompiledCircuit { input: graph.input.clone(), stages, basis: options.basis.clone(), mode: options.mode, metadata, report: None })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ir::{fc_node, Activation, BatchNorm, ChainStep, Conv2dGeometry, LinearNode, Node};
    use crate::quant::{quantize, RangeMode};

    fn unit_f() -> FusedFunction {
        FusedFunction { scale: 1.0, bias: vec![0.0] }
    }

    fn q8_unit() -> QuantParams {
        QuantParams::new(1.0, 0, 8, RangeMode::Wide).unwrap()
    }

    #[test]
    fn identity_fusion() {
        let chain = UnivariateChain::new(vec![ChainStep::Quant(q8_unit())]);
        let t = fuse_chain(&unit_f(), &chain, (-10, 10), 1).unwrap();
        assert_eq!(t.table(0), (-10..=10).collect::<Vec<i32>>().as_slice());
        assert_eq!(t.table_count(), 1);
    }

    #[test]
    fn relu_fusion() {
        let chain = UnivariateChain::new(vec![ChainStep::Activation(Activation::Relu), ChainStep::Quant(q8_unit())]);
        let t = fuse_chain(&unit_f(), &chain, (-3, 3), 1).unwrap();
        assert_eq!(t.table(0), &[0, 0, 0, 0, 1, 2, 3]);
    }

    #[test]
    fn fuse_errors() {
        let chain = UnivariateChain::new(vec![ChainStep::Quant(q8_unit())]);
        assert_eq!(fuse_chain(&unit_f(), &UnivariateChain::default(), (0, 1), 1), Err(FusionError::NotQuantized));
        assert!(matches!(fuse_chain(&unit_f(), &chain, (-40_000, 40_000), 1), Err(FusionError::AccumulatorTooWide { bits: 17, .. })));
        assert!(fuse_chain(&unit_f(), &chain, (-32768, 32767), 1).is_ok());
        assert!(matches!(fuse_chain(&unit_f(), &chain, (2, 1), 1), Err(FusionError::EmptyDomain { .. })));
    }

    #[test]
    fn batchnorm_relu_matches_pointwise_oracle() {
        let bn = BatchNorm { gamma: vec![1.7], beta: vec![-0.2], running_mean: vec![0.3], running_var: vec![0.8], epsilon: 1e-5 };
        let qo = QuantParams::new(0.05, -3, 4, RangeMode::Wide).unwrap();
        let chain = UnivariateChain::new(vec![
            ChainStep::BatchNorm(bn.clone()),
            ChainStep::Activation(Activation::Relu),
            ChainStep::Quant(qo),
        ]);
        let (sx, sw, b) = (0.037, 0.21, 0.11);
        let f = FusedFunction { scale: sx * sw, bias: vec![b] };
        let t = fuse_chain(&f, &chain, (-50, 50), 1).unwrap();
        for q in -50i64..=50 {
            let r = sx * sw * q as f64 + b;
            let r = bn.gamma[0] * (r - bn.running_mean[0]) / (bn.running_var[0] + bn.epsilon).sqrt() + bn.beta[0];
            let r = r.max(0.0);
            let expect = ((r / 0.05).floor() as i64 - 3).clamp(-8, 7) as i32;
            assert_eq!(t.table(0)[(q + 50) as usize], expect, "q = {q}");
        }
    }

    #[test]
    fn per_channel_tables_and_dedup() {
        let qo = QuantParams::new(0.5, 0, 3, RangeMode::Narrow).unwrap();
        let bn = BatchNorm {
            gamma: vec![1.0, 1.0, 2.0],
            beta: vec![0.0; 3],
            running_mean: vec![0.0; 3],
            running_var: vec![1.0; 3],
            epsilon: 0.0,
        };
        let chain = UnivariateChain::new(vec![ChainStep::BatchNorm(bn), ChainStep::Quant(qo)]);
        let f = FusedFunction { scale: 0.25, bias: vec![0.0; 3] };
        let t = fuse_chain(&f, &chain, (-8, 8), 3).unwrap();
        assert_eq!(t.table_count(), 3);
        assert_eq!(t.tables.len(), 2);
        assert_eq!(t.channel_table, vec![0, 0, 1]);

        let shared = UnivariateChain::new(vec![ChainStep::Quant(qo)]);
        assert_eq!(fuse_chain(&f, &shared, (-8, 8), 3).unwrap().table_count(), 1);
    }

    #[test]
    fn table_entries_stay_in_output_range() {
        let qo = QuantParams::new(0.01, 1, 2, RangeMode::Narrow).unwrap();
        let chain = UnivariateChain::new(vec![ChainStep::Quant(qo)]);
        let t = fuse_chain(&FusedFunction { scale: 1.0, bias: vec![0.3] }, &chain, (-100, 100), 1).unwrap();
        assert!(t.tables[0].iter().all(|&v| qo.contains(v)));
        assert_eq!(t.lookup(0, 101, OutOfDomainPolicy::Strict), None);
        assert_eq!(t.lookup(0, 101, OutOfDomainPolicy::Clamp), Some(t.tables[0][200]));
    }

    /// fc with weights [1, -1] over 2-bit Narrow inputs.
    pub(crate) fn single_neuron() -> GraphIR {
        let qx = QuantParams::new(0.5, 0, 2, RangeMode::Narrow).unwrap();
        let qw = QuantParams::symmetric(1.0, 2, RangeMode::Narrow).unwrap();
        let qo = QuantParams::new(0.25, 0, 4, RangeMode::Wide).unwrap();
        GraphIR::new(
            InputSpec { shape: vec![2], qparams: Some(qx) },
            vec![
                Node::Linear(fc_node(QTensor::new(vec![1, 2], vec![1, -1], qw).unwrap(), vec![0.125], qx)),
                Node::Chain(UnivariateChain::new(vec![ChainStep::Quant(qo)])),
            ],
        )
    }

    #[test]
    fn single_neuron_circuit() {
        let g = single_neuron();
        let c = compile(&g, &[], &CompileOptions { mode: DomainMode::WorstCase, ..Default::default() }).unwrap();
        assert_eq!(c.stages.len(), 1);
        let s = &c.stages[0];
        assert_eq!(s.dot.active_connections(), vec![2]);
        assert_eq!(s.domain, (-2, 2));
        let tlu = s.tlu.as_ref().unwrap();
        assert_eq!(tlu.domain_len(), 5);
        for a in -1..=1 {
            for b in -1..=1 {
                let acc = s.dot.accumulate(&[a, b])[0];
                assert_eq!(acc, (a - b) as i64);
                // Direct evaluation: Q(S_x S_w (a - b) + b_0).
                let direct = quantize(0.5 * (a - b) as f64 + 0.125, &QuantParams::new(0.25, 0, 4, RangeMode::Wide).unwrap()).unwrap();
                assert_eq!(tlu.lookup(0, acc, OutOfDomainPolicy::Strict), Some(direct));
            }
        }
    }

    #[test]
    fn measured_mode_needs_calibration() {
        assert_eq!(compile(&single_neuron(), &[], &CompileOptions::default()), Err(CompileError::EmptyCalibration));
    }

    #[test]
    fn measured_domain_is_padded_and_clipped() {
        assert_eq!(pad_domain((0, 10), 0.2, (-100, 100)), (-2, 12));
        assert_eq!(pad_domain((0, 11), 0.2, (-100, 100)), (-3, 14));
        assert_eq!(pad_domain((-5, 5), 0.2, (-6, 6)), (-6, 6));
        assert_eq!(pad_domain((3, 3), 0.2, (-6, 6)), (3, 3));
    }

    #[test]
    fn too_wide_names_the_node() {
        let qx = QuantParams::new(1.0, 0, 8, RangeMode::Wide).unwrap();
        let qw = QuantParams::symmetric(1.0, 8, RangeMode::Wide).unwrap();
        let w = QTensor::new(vec![1, 64], vec![-128; 64], qw).unwrap();
        let g = GraphIR::new(
            InputSpec { shape: vec![64], qparams: Some(qx) },
            vec![Node::Linear(fc_node(w, vec![0.0], qx)), Node::Chain(UnivariateChain::new(vec![ChainStep::Quant(qx)]))],
        );
        let e = compile(&g, &[], &CompileOptions { mode: DomainMode::WorstCase, ..Default::default() }).unwrap_err();
        assert!(matches!(e, CompileError::Fusion { node: 0, source: FusionError::AccumulatorTooWide { bits: 22, .. } }), "{e}");
        assert!(e.to_string().starts_with("node 0: accumulator too wide"));
    }

    #[test]
    fn conv_connections_match_nested_loops() {
        let g = Conv2dGeometry { in_channels: 2, out_channels: 3, kernel_h: 3, kernel_w: 2, stride: 2, padding: 1 };
        let op = LinearOp::Conv2d(g);
        let input_shape = vec![2, 5, 6];
        let qx = QuantParams::new(1.0, 0, 4, RangeMode::Wide).unwrap();
        let qw = QuantParams::symmetric(1.0, 4, RangeMode::Narrow).unwrap();
        let n = 3 * 2 * 3 * 2;
        let w = QTensor::new(vec![3, 2, 3, 2], (0..n).map(|i| (i as i32 % 15) - 7).collect(), qw).unwrap();
        let x: Vec<i32> = (0..60).map(|i| (i * 7 % 16) - 8).collect();
        let node = LinearNode { op, weights: Some(w.clone()), bias: vec![0.0; 3], input_qparams: Some(qx) };
        let dot = DotAccNode::new(op, input_shape.clone(), qx, node.weights.as_ref());
        let graph = GraphIR::new(
            InputSpec { shape: input_shape, qparams: Some(qx) },
            vec![Node::Linear(node), Node::Chain(UnivariateChain::default())],
        );
        let input = QTensor::new(vec![2, 5, 6], x.clone(), qx).unwrap();
        let reference = crate::reference::reference_eval(&graph, &input).unwrap();
        assert_eq!(dot.accumulate(&x), reference.accumulators);
    }
}
