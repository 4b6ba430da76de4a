//! Post-training quantization of real-valued sequential models.

use thiserror::Error;

use super::{ChainStep, Conv2dGeometry, GraphIR, InputSpec, LinearNode, LinearOp, Node, UnivariateChain};
use crate::quant::{calibrate, CalibrationStats, QTensor, QuantError, RangeMode, Rounding};
use crate::reference::linear_forward_f64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImportError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("layer {layer}: {reason}")]
    UnsupportedLayer { layer: usize, reason: String },
    #[error("calibration sample {index} has {found} values, expected {expected}")]
    SampleShape { index: usize, found: usize, expected: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FloatLinear {
    /// Row-major `[out, in]` weights.
    FullyConnected { in_features: usize, out_features: usize, weights: Vec<f64>, bias: Vec<f64> },
    /// `[out_c, in_c, kh, kw]` weights.
    Conv2d { geometry: Conv2dGeometry, weights: Vec<f64>, bias: Vec<f64> },
    AvgPool2d { window: usize, stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatLayer {
    pub linear: FloatLinear,
    /// Real univariate steps after the linear op; must not contain Quant or Dequant.
    pub post: Vec<ChainStep>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub input_shape: Vec<usize>,
    pub layers: Vec<FloatLayer>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportOptions {
    pub bits: u32,
    pub range_mode: RangeMode,
    pub input_bits: u32,
    pub input_range_mode: RangeMode,
}

impl ImportOptions {
    pub fn new(bits: u32, range_mode: RangeMode) -> Self {
        Self { bits, range_mode, input_bits: 8, input_range_mode: RangeMode::Wide }
    }
}

impl FloatLinear {
    fn op(&self) -> LinearOp {
        match *self {
            FloatLinear::FullyConnected { in_features, out_features, .. } => LinearOp::FullyConnected { in_features, out_features },
            FloatLinear::Conv2d { geometry, .. } => LinearOp::Conv2d(geometry),
            FloatLinear::AvgPool2d { window, stride } => LinearOp::AvgPool2d { window, stride },
        }
    }

    fn params(&self) -> (Option<&[f64]>, &[f64]) {
        match self {
            FloatLinear::FullyConnected { weights, bias, .. } | FloatLinear::Conv2d { weights, bias, .. } => {
                (Some(weights), bias)
            }
            FloatLinear::AvgPool2d { .. } => (None, &[]),
        }
    }
}

/// Quantizes every tensor of `model`: the input affine over the calibration
/// range, weights symmetric via max-abs (floor rounding), activations affine
/// over the range observed when replaying `calibration` through the float
/// model. The terminal layer keeps its real output.
pub fn import_float_model(model: &FloatModel, calibration: &[Vec<f64>], options: ImportOptions) -> Result<GraphIR, ImportError> {
    if calibration.is_empty() {
        return Err(ImportError::EmptyCalibration);
    }
    let input_len: usize = model.input_shape.iter().product();
    for (index, s) in calibration.iter().enumerate() {
        if s.len() != input_len {
            return Err(ImportError::SampleShape { index, found: s.len(), expected: input_len });
        }
    }
    if model.layers.is_empty() {
        return Err(ImportError::UnsupportedLayer { layer: 0, reason: "model has no layers".into() });
    }

    let input_q = calibrate(
        &CalibrationStats::from_values(calibration.iter().flatten().copied()),
        options.input_bits,
        options.input_range_mode,
        false,
    )?;

    let mut nodes = Vec::with_capacity(2 * model.layers.len());
    let mut shape = model.input_shape.clone();
    let mut activations: Vec<Vec<f64>> = calibration.to_vec();
    let mut upstream = input_q;
    let last = model.layers.len() - 1;

    for (li, layer) in model.layers.iter().enumerate() {
        let op = layer.linear.op();
        let out_shape = op.output_shape(&shape).ok_or_else(|| ImportError::UnsupportedLayer {
            layer: li,
            reason: format!("{} cannot consume input of shape {shape:?}", op.name()),
        })?;
        let channels = super::channel_count(&out_shape);
        if let Some(s) = layer.post.iter().find(|s| matches!(s, ChainStep::Quant(_) | ChainStep::Dequant(_))) {
            return Err(ImportError::UnsupportedLayer { layer: li, reason: format!("post step {s:?} is not a real function") });
        }

        let (weights, bias) = layer.linear.params();
        let bias: Vec<f64> = if matches!(op, LinearOp::AvgPool2d { .. }) { vec![0.0; channels] } else { bias.to_vec() };
        if bias.len() != channels {
            return Err(ImportError::UnsupportedLayer { layer: li, reason: format!("bias length {} != {channels}", bias.len()) });
        }
        let qweights = match (weights, op.expected_weight_shape()) {
            (Some(w), Some(wshape)) => {
                if w.len() != wshape.iter().product::<usize>() {
                    return Err(ImportError::UnsupportedLayer { layer: li, reason: format!("weights do not match shape {wshape:?}") });
                }
                let wq = calibrate(&CalibrationStats::from_values(w.iter().copied()), options.bits, options.range_mode, true)?;
                Some(QTensor::quantize(wshape, w, wq, Rounding::Floor)?)
            }
            _ => None,
        };

        let chain_real = UnivariateChain::new(layer.post.clone());
        let mut stats = CalibrationStats::new();
        for a in activations.iter_mut() {
            let pre = linear_forward_f64(&op, weights, &bias, a, &shape, &out_shape);
            let post = pre
                .iter()
                .enumerate()
                .map(|(i, &v)| chain_real.apply(super::channel_of(&out_shape, i), v))
                .collect::<Result<Vec<_>, _>>()?;
            stats.extend(post.iter().copied());
            *a = post;
        }

        let mut steps = layer.post.clone();
        let next_q = if li == last {
            None
        } else {
            let q = calibrate(&stats, options.bits, options.range_mode, false)?;
            steps.push(ChainStep::Quant(q));
            Some(q)
        };
        nodes.push(Node::Linear(LinearNode { op, weights: qweights, bias, input_qparams: Some(upstream) }));
        nodes.push(Node::Chain(UnivariateChain::new(steps)));
        if let Some(q) = next_q {
            upstream = q;
        }
        shape = out_shape;
    }

    let mut graph = GraphIR::new(InputSpec { shape: model.input_shape.clone(), qparams: Some(input_q) }, nodes);
    graph.metadata.insert("source".into(), "import".into());
    if let Some(d) = graph.validate().first() {
        return Err(ImportError::UnsupportedLayer { layer: d.node / 2, reason: d.message.clone() });
    }
    Ok(graph)
}
