//! Model files: JSON manifest for topology and quantizers, blob for tensors.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BatchNorm, ChainStep, Diagnostic, GraphIR, InputSpec, LinearNode, LinearOp, Node, UnivariateChain};
use crate::container::{self, BlobReader, BlobWriter, ContainerError, TensorRef};
use crate::quant::{QTensor, QuantError, QuantParams};

pub const MODEL_MAGIC: &[u8; 8] = b"PBSNMODL";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("tensor {name}: {source}")]
    Tensor { name: String, source: QuantError },
    #[error("graph does not validate: {}", .0.iter().map(|d| d.message.as_str()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    input: InputSpec,
    nodes: Vec<NodeEntry>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
enum NodeEntry {
    Linear {
        op: LinearOp,
        weights: Option<WeightsEntry>,
        bias: TensorRef,
        input_qparams: Option<QuantParams>,
    },
    Chain {
        steps: Vec<StepEntry>,
    },
}

#[derive(Serialize, Deserialize)]
struct WeightsEntry {
    shape: Vec<usize>,
    qparams: QuantParams,
    data: TensorRef,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
enum StepEntry {
    Dequant(QuantParams),
    BatchNorm {
        gamma: TensorRef,
        beta: TensorRef,
        running_mean: TensorRef,
        running_var: TensorRef,
        epsilon: f64,
    },
    Activation(super::Activation),
    AffineRescale { multiplier: f64, offset: f64 },
    Quant(QuantParams),
}

pub fn model_to_bytes(graph: &GraphIR) -> Result<Vec<u8>, FormatError> {
    let diags = graph.validate();
    if !diags.is_empty() {
        return Err(FormatError::Invalid(diags));
    }
    let mut blob = BlobWriter::new();
    let nodes = graph
        .nodes
        .iter()
        .map(|n| match n {
            Node::Linear(l) => NodeEntry::Linear {
                op: l.op,
                weights: l.weights.as_ref().map(|w| WeightsEntry {
                    shape: w.shape().to_vec(),
                    qparams: *w.qparams(),
                    data: blob.push_i32(w.data()),
                }),
                bias: blob.push_f64(&l.bias),
                input_qparams: l.input_qparams,
            },
            Node::Chain(c) => NodeEntry::Chain {
                steps: c
                    .steps
                    .iter()
                    .map(|s| match s {
                        ChainStep::Dequant(p) => StepEntry::Dequant(*p),
                        ChainStep::BatchNorm(bn) => StepEntry::BatchNorm {
                            gamma: blob.push_f64(&bn.gamma),
                            beta: blob.push_f64(&bn.beta),
                            running_mean: blob.push_f64(&bn.running_mean),
                            running_var: blob.push_f64(&bn.running_var),
                            epsilon: bn.epsilon,
                        },
                        ChainStep::Activation(a) => StepEntry::Activation(*a),
                        ChainStep::AffineRescale { multiplier, offset } => {
                            StepEntry::AffineRescale { multiplier: *multiplier, offset: *offset }
                        }
                        ChainStep::Quant(p) => StepEntry::Quant(*p),
                    })
                    .collect(),
            },
        })
        .collect();
    let manifest = Manifest { input: graph.input.clone(), nodes, metadata: graph.metadata.clone() };
    let json = serde_json::to_vec_pretty(&manifest).map_err(ContainerError::from)?;
    Ok(container::write(MODEL_MAGIC, MODEL_VERSION, &json, &blob.into_bytes()))
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<GraphIR, FormatError> {
    let (manifest, blob) = container::read(MODEL_MAGIC, MODEL_VERSION, bytes)?;
    let manifest: Manifest = serde_json::from_slice(manifest).map_err(ContainerError::from)?;
    let blob = BlobReader::new(blob);
    let mut nodes = Vec::with_capacity(manifest.nodes.len());
    for (i, entry) in manifest.nodes.into_iter().enumerate() {
        nodes.push(match entry {
            NodeEntry::Linear { op, weights, bias, input_qparams } => {
                let weights = match weights {
                    None => None,
                    Some(w) => {
                        let name = format!("node{i}.weights");
                        let data = blob.i32s(&name, &w.data)?;
                        Some(QTensor::new(w.shape, data, w.qparams).map_err(|source| FormatError::Tensor { name, source })?)
                    }
                };
                let bias = blob.f64s(&format!("node{i}.bias"), &bias)?;
                Node::Linear(LinearNode { op, weights, bias, input_qparams })
            }
            NodeEntry::Chain { steps } => {
                let steps = steps
                    .into_iter()
                    .map(|s| {
                        Ok(match s {
                            StepEntry::Dequant(p) => ChainStep::Dequant(p),
                            StepEntry::BatchNorm { gamma, beta, running_mean, running_var, epsilon } => {
                                ChainStep::BatchNorm(BatchNorm {
                                    gamma: blob.f64s(&format!("node{i}.bn.gamma"), &gamma)?,
                                    beta: blob.f64s(&format!("node{i}.bn.beta"), &beta)?,
                                    running_mean: blob.f64s(&format!("node{i}.bn.mean"), &running_mean)?,
                                    running_var: blob.f64s(&format!("node{i}.bn.var"), &running_var)?,
                                    epsilon,
                                })
                            }
                            StepEntry::Activation(a) => ChainStep::Activation(a),
                            StepEntry::AffineRescale { multiplier, offset } => ChainStep::AffineRescale { multiplier, offset },
                            StepEntry::Quant(p) => ChainStep::Quant(p),
                        })
                    })
                    .collect::<Result<Vec<_>, ContainerError>>()?;
                Node::Chain(UnivariateChain { steps })
            }
        });
    }
    let graph = GraphIR { input: manifest.input, nodes, metadata: manifest.metadata };
    let diags = graph.validate();
    if !diags.is_empty() {
        return Err(FormatError::Invalid(diags));
    }
    Ok(graph)
}

pub fn save_model(graph: &GraphIR, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    let bytes = model_to_bytes(graph)?;
    std::fs::write(path, bytes).map_err(|source| FormatError::Io { path: path.display().to_string(), source })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GraphIR, FormatError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| FormatError::Io { path: path.display().to_string(), source })?;
    model_from_bytes(&bytes)
}
