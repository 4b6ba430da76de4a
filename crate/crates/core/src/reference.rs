//! Clear-domain evaluation of a [`GraphIR`], layer by layer:
//! `q_o = Q(chain(S_x S_w Σ (q_x - Z_x)(q_w - Z_w) + b))`.
//!
//! Written with direct nested loops over the layer geometry and raw codes,
//! independent of the compiled circuit's connection lists, so it can serve as
//! the oracle the circuit is checked against.

use crate::eval::{EvalError, InferenceOutput, OutputValues, StageTrace};
use crate::ir::{channel_of, univariate_value, GraphIR, LinearOp};
use crate::quant::QTensor;

pub fn reference_eval(graph: &GraphIR, input: &QTensor) -> Result<InferenceOutput, EvalError> {
    reference_eval_traced(graph, input).map(|(out, _)| out)
}

pub fn reference_eval_traced(graph: &GraphIR, input: &QTensor) -> Result<(InferenceOutput, Vec<StageTrace>), EvalError> {
    if input.shape() != graph.input.shape.as_slice() {
        return Err(EvalError::ShapeMismatch { expected: graph.input.shape.clone(), found: input.shape().to_vec() });
    }
    if graph.input.qparams.as_ref() != Some(input.qparams()) {
        return Err(EvalError::InputParamsMismatch);
    }
    let diags = graph.validate();
    if let Some(d) = diags.first() {
        return Err(EvalError::InvalidGraph(d.message.clone()));
    }

    let mut codes: Vec<i32> = input.data().to_vec();
    let mut traces = Vec::new();
    let layers = graph.layers();
    for layer in &layers {
        let lin = layer.linear;
        let zx = lin.input_qparams.expect("validated").zero_point() as i64;
        let acc = accumulate(&lin.op, lin.weights.as_ref(), &codes, zx, &layer.input_shape, &layer.output_shape);

        if layer.terminal && layer.chain.output_quant().is_none() {
            let scores = acc
                .iter()
                .enumerate()
                .map(|(i, &a)| univariate_value(lin, layer.chain, channel_of(&layer.output_shape, i), a))
                .collect::<Result<Vec<_>, _>>()?;
            let (tlu_part, _) = layer.chain.split_at_last_quant();
            let outputs = match tlu_part {
                Some(prefix) => Some(
                    acc.iter()
                        .enumerate()
                        .map(|(i, &a)| univariate_value(lin, &prefix, channel_of(&layer.output_shape, i), a).map(|v| v as i32))
                        .collect::<Result<Vec<_>, _>>()?,
                ),
                None => None,
            };
            traces.push(StageTrace { accumulators: acc.clone(), outputs });
            let out = InferenceOutput { shape: layer.output_shape.clone(), accumulators: acc, values: OutputValues::Scores(scores) };
            return Ok((out, traces));
        }

        let next = acc
            .iter()
            .enumerate()
            .map(|(i, &a)| univariate_value(lin, layer.chain, channel_of(&layer.output_shape, i), a).map(|v| v as i32))
            .collect::<Result<Vec<_>, _>>()?;
        traces.push(StageTrace { accumulators: acc.clone(), outputs: Some(next.clone()) });
        if layer.terminal {
            let out = InferenceOutput { shape: layer.output_shape.clone(), accumulators: acc, values: OutputValues::Codes(next) };
            return Ok((out, traces));
        }
        codes = next;
    }
    unreachable!("validated graph ends with a terminal layer")
}

/// Σ (q_x - Z_x)(q_w - Z_w) for every output element.
fn accumulate(op: &LinearOp, weights: Option<&QTensor>, x: &[i32], zx: i64, in_shape: &[usize], out_shape: &[usize]) -> Vec<i64> {
    let centered = |v: i32| v as i64 - zx;
    match *op {
        LinearOp::FullyConnected { in_features, out_features } => {
            let w = weights.expect("fc has weights");
            let zw = w.qparams().zero_point() as i64;
            let wd = w.data();
            (0..out_features)
                .map(|k| (0..in_features).map(|i| centered(x[i]) * (wd[k * in_features + i] as i64 - zw)).sum())
                .collect()
        }
        LinearOp::Conv2d(g) => {
            let w = weights.expect("conv has weights");
            let zw = w.qparams().zero_point() as i64;
            let wd = w.data();
            let (h, wi) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut out = Vec::with_capacity(g.out_channels * oh * ow);
            for co in 0..g.out_channels {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = 0i64;
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (y * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (xo * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                        // Padding holds the real value zero, i.e. q = Z_x.
                                        continue;
                                    }
                                    let xv = x[(ci * h + iy as usize) * wi + ix as usize];
                                    let wv = wd[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                                    s += centered(xv) * (wv as i64 - zw);
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
            out
        }
        LinearOp::AvgPool2d { window, stride } => {
            let (c, h, wi) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = 0i64;
                        for ky in 0..window {
                            for kx in 0..window {
                                s += centered(x[(ch * h + y * stride + ky) * wi + xo * stride + kx]);
                            }
                        }
                        out.push(s);
                    }
                }
            }
            out
        }
    }
}

/// Real-valued forward pass of a single linear op, used by float import.
pub(crate) fn linear_forward_f64(op: &LinearOp, weights: Option<&[f64]>, bias: &[f64], x: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    match *op {
        LinearOp::FullyConnected { in_features, out_features } => {
            let w = weights.expect("fc has weights");
            (0..out_features)
                .map(|k| (0..in_features).map(|i| x[i] * w[k * in_features + i]).sum::<f64>() + bias[k])
                .collect()
        }
        LinearOp::Conv2d(g) => {
            let w = weights.expect("conv has weights");
            let (h, wi) = (in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut out = Vec::with_capacity(g.out_channels * oh * ow);
            for co in 0..g.out_channels {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = bias[co];
                        for ci in 0..g.in_channels {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (y * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (xo * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wi as isize {
                                        continue;
                                    }
                                    s += x[(ci * h + iy as usize) * wi + ix as usize]
                                        * w[((co * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
            out
        }
        LinearOp::AvgPool2d { window, stride } => {
            let (c, h, wi) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let area = (window * window) as f64;
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = 0.0;
                        for ky in 0..window {
                            for kx in 0..window {
                                s += x[(ch * h + y * stride + ky) * wi + xo * stride + kx];
                            }
                        }
                        out.push(s / area + bias[ch]);
                    }
                }
            }
            out
        }
    }
}
