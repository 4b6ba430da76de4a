//! Bit-width analysis of compiled circuits.
//!
//! Widths are signed and include the sign bit: `[-10, 10]` needs 5 bits and
//! `{0}` needs 1. Bias never enters an accumulator bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::OutOfDomainPolicy;
use crate::fusion::{CompiledCircuit, DotAccNode, Encoding};
use crate::ir::{GraphIR, Node};
use crate::quant::{integer_range, QTensor, QuantParams, RangeMode};
use crate::sim::{run_batch, RunConfig, SimError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Smallest `b >= 1` with `[lo, hi] ⊆ [-2^(b-1), 2^(b-1) - 1]`.
pub fn signed_bits(lo: i64, hi: i64) -> u32 {
    let need = |v: i64| if v < 0 { 65 - (!v).leading_zeros() } else { 65 - v.leading_zeros() };
    need(lo).max(need(hi))
}

/// Interval of `Σ w_i x_i` for every output, each `x_i` ranging over the
/// centered input codes. Exact because weights are constants.
pub fn worst_case_intervals(node: &DotAccNode, input_qparams: &QuantParams) -> Vec<(i64, i64)> {
    let (a, b) = input_qparams.centered_range();
    (0..node.outputs())
        .map(|k| {
            node.connections_of(k).fold((0i64, 0i64), |(lo, hi), (_, w)| {
                let (p, q) = (w as i64 * a, w as i64 * b);
                (lo + p.min(q), hi + p.max(q))
            })
        })
        .collect()
}

/// Hull of [`worst_case_intervals`] over all outputs of the node.
pub fn worst_case_interval(node: &DotAccNode) -> (i64, i64) {
    hull(worst_case_intervals(node, &node.input_qparams).into_iter()).unwrap_or((0, 0))
}

fn hull(it: impl Iterator<Item = (i64, i64)>) -> Option<(i64, i64)> {
    it.reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorstCase {
    pub bits: u32,
    pub interval: (i64, i64),
}

pub fn worst_case_accumulator_bits(node: &DotAccNode, input_qparams: &QuantParams) -> WorstCase {
    let interval = hull(worst_case_intervals(node, input_qparams).into_iter()).unwrap_or((0, 0));
    WorstCase { bits: signed_bits(interval.0, interval.1), interval }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    DotAcc,
    Tlu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    /// Circuit node id: `2i` for the dot product of stage `i`, `2i + 1` for its lookup.
    pub node: usize,
    pub kind: NodeKind,
    pub elements: usize,
    pub worst_case_bits: u32,
    pub worst_case_range: (i64, i64),
    pub measured_bits: Option<u32>,
    pub measured_range: Option<(i64, i64)>,
    /// Table domain, for lookup nodes.
    pub domain: Option<(i64, i64)>,
    pub encoding: Encoding,
    pub pbs_count: u64,
    /// 2-norm of the corrected weight tensor, for dot nodes with weights.
    pub weight_two_norm: Option<f64>,
}

impl NodeReport {
    pub fn bits(&self) -> u32 {
        self.measured_bits.unwrap_or(self.worst_case_bits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub nodes: Vec<NodeReport>,
    pub circuit_bit_width: u32,
    pub worst_case_bit_width: u32,
    pub max_weight_two_norm: f64,
    pub max_neuron_two_norm: f64,
    pub total_pbs: u64,
    pub calibration_samples: usize,
    /// Accumulators seen outside their table domain during measurement.
    pub out_of_domain_events: u64,
}

impl AnalysisReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("circuit_bit_width: {}\n", self.circuit_bit_width));
        s.push_str(&format!("worst_case_bit_width: {}\n", self.worst_case_bit_width));
        s.push_str(&format!("max_weight_two_norm: {:.6}\n", self.max_weight_two_norm));
        s.push_str(&format!("max_neuron_two_norm: {:.6}\n", self.max_neuron_two_norm));
        s.push_str(&format!("total_pbs: {}\n", self.total_pbs));
        s.push_str(&format!("calibration_samples: {}\n", self.calibration_samples));
        s.push_str(&format!("out_of_domain_events: {}\n", self.out_of_domain_events));
        s.push_str("node  kind     elements  worst_bits  measured_bits  measured_range        encoding  pbs\n");
        for n in &self.nodes {
            let kind = match n.kind {
                NodeKind::DotAcc => "dot_acc",
                NodeKind::Tlu => "tlu",
            };
            let measured = n.measured_bits.map_or("-".to_string(), |b| b.to_string());
            let range = n.measured_range.map_or("-".to_string(), |(a, b)| format!("[{a}, {b}]"));
            let enc = match n.encoding {
                Encoding::Native => "native",
                Encoding::Crt => "crt",
            };
            s.push_str(&format!(
                "{:<5} {:<8} {:>8}  {:>10}  {:>13}  {:<20}  {:<8}  {}\n",
                n.node, kind, n.elements, n.worst_case_bits, measured, range, enc, n.pbs_count
            ));
        }
        s
    }
}

/// `(tensor 2-norm, max row 2-norm)` of a row-major weight tensor.
fn two_norms(weights: &[i32], rows: usize) -> (f64, f64) {
    let sq = |ws: &[i32]| ws.iter().map(|&w| (w as f64) * (w as f64)).sum::<f64>();
    if weights.is_empty() || rows == 0 {
        return (0.0, 0.0);
    }
    let row_len = weights.len() / rows;
    let neuron = weights.chunks(row_len).map(|r| sq(r).sqrt()).fold(0.0, f64::max);
    (sq(weights).sqrt(), neuron)
}

/// Maximum over layers of the corrected integer weight tensor's 2-norm, and
/// the maximum per-neuron (per output row) 2-norm.
pub fn max_weight_two_norm(circuit: &CompiledCircuit) -> (f64, f64) {
    circuit
        .stages
        .iter()
        .filter(|s| !s.dot.weights.is_empty())
        .map(|s| two_norms(&s.dot.weights, s.dot.channels()))
        .fold((0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)))
}

/// [`max_weight_two_norm`] computed from the graph's weight tensors.
pub fn max_weight_two_norm_graph(graph: &GraphIR) -> (f64, f64) {
    graph
        .nodes
        .iter()
        .filter_map(|n| match n {
            Node::Linear(l) => l.weights.as_ref(),
            Node::Chain(_) => None,
        })
        .map(|w| {
            let zw = w.qparams().zero_point();
            let corrected: Vec<i32> = w.data().iter().map(|&q| q - zw).collect();
            two_norms(&corrected, w.shape()[0])
        })
        .fold((0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)))
}

/// Lookups per inference; CRT-encoded lookups cost one per residue.
pub fn count_pbs(circuit: &CompiledCircuit) -> u64 {
    circuit
        .stages
        .iter()
        .filter(|s| s.tlu.is_some())
        .map(|s| {
            let per = match s.encoding {
                Encoding::Native => 1,
                Encoding::Crt => circuit.basis.residue_count() as u64,
            };
            s.dot.outputs() as u64 * per
        })
        .sum()
}

fn build_report(circuit: &CompiledCircuit, measured: Option<&[(Option<(i64, i64)>, Option<(i64, i64)>)]>, samples: usize, ood: u64) -> AnalysisReport {
    let mut nodes = Vec::new();
    for (si, s) in circuit.stages.iter().enumerate() {
        let wc = worst_case_accumulator_bits(&s.dot, &s.dot.input_qparams);
        let m = measured.map(|m| m[si]);
        let acc_range = m.and_then(|m| m.0);
        let norm = (!s.dot.weights.is_empty()).then(|| two_norms(&s.dot.weights, s.dot.channels()).0);
        nodes.push(NodeReport {
            node: 2 * si,
            kind: NodeKind::DotAcc,
            elements: s.dot.outputs(),
            worst_case_bits: wc.bits,
            worst_case_range: wc.interval,
            measured_bits: acc_range.map(|(a, b)| signed_bits(a, b)),
            measured_range: acc_range,
            domain: None,
            encoding: s.encoding,
            pbs_count: 0,
            weight_two_norm: norm,
        });
        if let Some(t) = &s.tlu {
            let (lo, hi) = t.output_qparams.range();
            let out_range = m.and_then(|m| m.1);
            let per = match s.encoding {
                Encoding::Native => 1,
                Encoding::Crt => circuit.basis.residue_count() as u64,
            };
            nodes.push(NodeReport {
                node: 2 * si + 1,
                kind: NodeKind::Tlu,
                elements: s.dot.outputs(),
                worst_case_bits: signed_bits(lo as i64, hi as i64),
                worst_case_range: (lo as i64, hi as i64),
                measured_bits: out_range.map(|(a, b)| signed_bits(a, b)),
                measured_range: out_range,
                domain: Some((t.domain_lo, t.domain_hi)),
                encoding: s.encoding,
                pbs_count: s.dot.outputs() as u64 * per,
                weight_two_norm: None,
            });
        }
    }
    let (max_weight_two_norm, max_neuron_two_norm) = max_weight_two_norm(circuit);
    AnalysisReport {
        circuit_bit_width: nodes.iter().map(NodeReport::bits).max().unwrap_or(1),
        worst_case_bit_width: nodes.iter().map(|n| n.worst_case_bits).max().unwrap_or(1),
        total_pbs: nodes.iter().map(|n| n.pbs_count).sum(),
        nodes,
        max_weight_two_norm,
        max_neuron_two_norm,
        calibration_samples: samples,
        out_of_domain_events: ood,
    }
}

/// Report from the worst-case bounds alone.
pub fn analyze_static(circuit: &CompiledCircuit) -> AnalysisReport {
    build_report(circuit, None, 0, 0)
}

fn merge(a: Option<(i64, i64)>, b: Option<(i64, i64)>) -> Option<(i64, i64)> {
    match (a, b) {
        (Some(x), Some(y)) => Some((x.0.min(y.0), x.1.max(y.1))),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Runs the exact simulator over `calibration` and records the range of every
/// accumulator and lookup output. Accumulators outside a table domain are
/// counted and the lookup clamped so measurement always completes.
pub fn measure_circuit_bitwidth(circuit: &CompiledCircuit, calibration: &[QTensor]) -> Result<AnalysisReport, AnalysisError> {
    measure_with_threads(circuit, calibration, 0)
}

pub fn measure_with_threads(circuit: &CompiledCircuit, calibration: &[QTensor], threads: usize) -> Result<AnalysisReport, AnalysisError> {
    if calibration.is_empty() {
        return Err(AnalysisError::EmptyCalibration);
    }
    let cfg = RunConfig { trace: true, policy: OutOfDomainPolicy::Clamp, threads, ..Default::default() };
    let n = circuit.stages.len();
    let mut ranges: Vec<(Option<(i64, i64)>, Option<(i64, i64)>)> = vec![(None, None); n];
    let mut ood = 0u64;
    for r in run_batch(circuit, calibration, &cfg) {
        let trace = r?.trace.expect("trace requested");
        for (si, (t, stage)) in trace.iter().zip(&circuit.stages).enumerate() {
            let acc = hull(t.accumulators.iter().map(|&a| (a, a)));
            let out = t.outputs.as_ref().and_then(|o| hull(o.iter().map(|&v| (v as i64, v as i64))));
            ranges[si] = (merge(ranges[si].0, acc), merge(ranges[si].1, out));
            if let Some(tlu) = &stage.tlu {
                ood += t.accumulators.iter().filter(|&&a| a < tlu.domain_lo || a > tlu.domain_hi).count() as u64;
            }
        }
    }
    Ok(build_report(circuit, Some(&ranges), calibration.len(), ood))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub active: usize,
    pub interval: (i64, i64),
    pub bits: u32,
}

/// Worst-case accumulator width of a neuron with `n` active connections for
/// each `n`, with weight and input codes in the given (centered) ranges.
pub fn pruning_sweep_with(weight_range: (i64, i64), input_range: (i64, i64), counts: &[usize]) -> Vec<SweepRow> {
    let products = [
        weight_range.0 * input_range.0,
        weight_range.0 * input_range.1,
        weight_range.1 * input_range.0,
        weight_range.1 * input_range.1,
    ];
    let (lo, hi) = (*products.iter().min().unwrap(), *products.iter().max().unwrap());
    counts
        .iter()
        .map(|&n| {
            let interval = (lo * n as i64, hi * n as i64);
            SweepRow { active: n, interval, bits: signed_bits(interval.0, interval.1) }
        })
        .collect()
}

/// Sweep for weights and inputs both quantized to `bits` in `mode` with zero
/// zero-point.
pub fn pruning_sweep(bits: u32, mode: RangeMode, counts: &[usize]) -> Vec<SweepRow> {
    let (lo, hi) = integer_range(bits, mode).expect("bits in range");
    let r = (lo as i64, hi as i64);
    pruning_sweep_with(r, r, counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub active: usize,
    pub narrow_bits: u32,
    pub wide_bits: u32,
}

pub fn pruning_curves(bits: u32, counts: &[usize]) -> Vec<SweepPoint> {
    pruning_sweep(bits, RangeMode::Narrow, counts)
        .into_iter()
        .zip(pruning_sweep(bits, RangeMode::Wide, counts))
        .map(|(n, w)| SweepPoint { active: n.active, narrow_bits: n.bits, wide_bits: w.bits })
        .collect()
}
