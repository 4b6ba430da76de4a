//! Circuit files, in the same manifest-plus-blob container as model files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CompiledCircuit, DomainMode, DotAccNode, Encoding, FusedFunction, Stage, TluNode};
use crate::analysis::AnalysisReport;
use crate::container::{self, BlobReader, BlobWriter, ContainerError, TensorRef};
use crate::crt::CrtBasis;
use crate::ir::{InputSpec, LinearOp, UnivariateChain};
use crate::quant::QuantParams;

pub const CIRCUIT_MAGIC: &[u8; 8] = b"PBSNCIRC";
pub const CIRCUIT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CircuitFormatError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("inconsistent circuit: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    input: InputSpec,
    basis: CrtBasis,
    mode: DomainMode,
    metadata: BTreeMap<String, String>,
    report: Option<AnalysisReport>,
    stages: Vec<StageEntry>,
}

#[derive(Serialize, Deserialize)]
struct StageEntry {
    op: LinearOp,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    input_qparams: QuantParams,
    weight_qparams: Option<QuantParams>,
    weights: TensorRef,
    scale: f64,
    bias: TensorRef,
    tlu: Option<TluEntry>,
    clear: UnivariateChain,
    worst_case: (i64, i64),
    observed: Option<(i64, i64)>,
    domain: (i64, i64),
    encoding: Encoding,
    source_node: usize,
}

#[derive(Serialize, Deserialize)]
struct TluEntry {
    domain_lo: i64,
    domain_hi: i64,
    output_qparams: QuantParams,
    per_channel: bool,
    tables: Vec<TensorRef>,
    channel_table: Vec<u32>,
}

pub fn circuit_to_bytes(circuit: &CompiledCircuit) -> Result<Vec<u8>, CircuitFormatError> {
    let mut blob = BlobWriter::new();
    let stages = circuit
        .stages
        .iter()
        .map(|s| StageEntry {
            op: s.dot.op,
            input_shape: s.dot.input_shape.clone(),
            output_shape: s.dot.output_shape.clone(),
            input_qparams: s.dot.input_qparams,
            weight_qparams: s.dot.weight_qparams,
            weights: blob.push_i32(&s.dot.weights),
            scale: s.f.scale,
            bias: blob.push_f64(&s.f.bias),
            tlu: s.tlu.as_ref().map(|t| TluEntry {
                domain_lo: t.domain_lo,
                domain_hi: t.domain_hi,
                output_qparams: t.output_qparams,
                per_channel: t.per_channel,
                tables: t.tables.iter().map(|tab| blob.push_i32(tab)).collect(),
                channel_table: t.channel_table.clone(),
            }),
            clear: s.clear.clone(),
            worst_case: s.worst_case,
            observed: s.observed,
            domain: s.domain,
            encoding: s.encoding,
            source_node: s.source_node,
        })
        .collect();
    let manifest = Manifest {
        input: circuit.input.clone(),
        basis: circuit.basis.clone(),
        mode: circuit.mode,
        metadata: circuit.metadata.clone(),
        report: circuit.report.clone(),
        stages,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(ContainerError::from)?;
    Ok(container::write(CIRCUIT_MAGIC, CIRCUIT_VERSION, &json, &blob.into_bytes()))
}

pub fn circuit_from_bytes(bytes: &[u8]) -> Result<CompiledCircuit, CircuitFormatError> {
    let (manifest, blob) = container::read(CIRCUIT_MAGIC, CIRCUIT_VERSION, bytes)?;
    let m: Manifest = serde_json::from_slice(manifest).map_err(ContainerError::from)?;
    let blob = BlobReader::new(blob);
    let invalid = |msg: String| CircuitFormatError::Invalid(msg);

    let mut stages = Vec::with_capacity(m.stages.len());
    let mut shape = m.input.shape.clone();
    for (i, e) in m.stages.into_iter().enumerate() {
        if e.op.output_shape(&shape).as_deref() != Some(e.output_shape.as_slice()) || e.input_shape != shape {
            return Err(invalid(format!("stage {i} shapes do not chain")));
        }
        let weights = blob.i32s(&format!("stage{i}.weights"), &e.weights)?;
        let expected = e.op.expected_weight_shape().map_or(0, |s| s.iter().product());
        if weights.len() != expected {
            return Err(invalid(format!("stage {i} has {} weights, expected {expected}", weights.len())));
        }
        let bias = blob.f64s(&format!("stage{i}.bias"), &e.bias)?;
        let channels = crate::ir::channel_count(&e.output_shape);
        if bias.len() != channels {
            return Err(invalid(format!("stage {i} bias length {} != {channels}", bias.len())));
        }
        if Encoding::for_bits(crate::analysis::signed_bits(e.domain.0, e.domain.1)) != Some(e.encoding) {
            return Err(invalid(format!("stage {i} encoding tag does not match its bit-width")));
        }
        let tlu = match e.tlu {
            None => None,
            Some(t) => {
                let tables = t
                    .tables
                    .iter()
                    .enumerate()
                    .map(|(k, r)| blob.i32s(&format!("stage{i}.table{k}"), r))
                    .collect::<Result<Vec<_>, _>>()?;
                let node = TluNode {
                    domain_lo: t.domain_lo,
                    domain_hi: t.domain_hi,
                    output_qparams: t.output_qparams,
                    per_channel: t.per_channel,
                    tables,
                    channel_table: t.channel_table,
                };
                let logical = if node.per_channel { channels } else { 1 };
                if node.domain_lo > node.domain_hi
                    || (node.domain_lo, node.domain_hi) != e.domain
                    || node.channel_table.len() != logical
                    || node.channel_table.iter().any(|&id| id as usize >= node.tables.len())
                    || node.tables.iter().any(|tab| tab.len() != node.domain_len() || tab.iter().any(|&v| !node.output_qparams.contains(v)))
                {
                    return Err(invalid(format!("stage {i} table is inconsistent with its domain or output range")));
                }
                Some(node)
            }
        };
        let dot = DotAccNode::from_parts(e.op, e.input_shape, e.output_shape.clone(), e.input_qparams, e.weight_qparams, weights);
        stages.push(Stage {
            dot,
            f: FusedFunction { scale: e.scale, bias },
            tlu,
            clear: e.clear,
            worst_case: e.worst_case,
            observed: e.observed,
            domain: e.domain,
            encoding: e.encoding,
            source_node: e.source_node,
        });
        shape = e.output_shape;
    }
    if stages.is_empty() {
        return Err(invalid("circuit has no stages".into()));
    }
    Ok(CompiledCircuit { input: m.input, stages, basis: m.basis, mode: m.mode, metadata: m.metadata, report: m.report })
}

pub fn save_circuit(circuit: &CompiledCircuit, path: impl AsRef<Path>) -> Result<(), CircuitFormatError> {
    let path = path.as_ref();
    let bytes = circuit_to_bytes(circuit)?;
    std::fs::write(path, bytes).map_err(|source| CircuitFormatError::Io { path: path.display().to_string(), source })
}

pub fn load_circuit(path: impl AsRef<Path>) -> Result<CompiledCircuit, CircuitFormatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CircuitFormatError::Io { path: path.display().to_string(), source })?;
    circuit_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{compile, CompileOptions};
    use crate::ir::tests::three_layer;

    #[test]
    fn roundtrip() {
        let g = three_layer();
        let c = compile(&g, &[], &CompileOptions { mode: DomainMode::WorstCase, ..Default::default() }).unwrap();
        let bytes = circuit_to_bytes(&c).unwrap();
        assert_eq!(circuit_to_bytes(&c).unwrap(), bytes);
        assert_eq!(circuit_from_bytes(&bytes).unwrap(), c);
        assert!(matches!(
            crate::ir::model_from_bytes(&bytes),
            Err(crate::ir::FormatError::Container(ContainerError::BadMagic { .. }))
        ));
    }
}
