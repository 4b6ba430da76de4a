//! Random small models for property suites and benchmarks.

use rand::Rng;

use crate::ir::{
    channel_count, Activation, BatchNorm, ChainStep, Conv2dGeometry, FloatLayer, FloatLinear, FloatModel, GraphIR, InputSpec,
    LinearNode, LinearOp, Node, UnivariateChain,
};
use crate::quant::{integer_range, QTensor, QuantParams, RangeMode};

fn mode(rng: &mut impl Rng) -> RangeMode {
    if rng.random_bool(0.5) {
        RangeMode::Narrow
    } else {
        RangeMode::Wide
    }
}

/// Quantizer with `bits` in `bits_range`, either range mode, any zero point
/// in range and a scale drawn log-uniformly from `[1/64, 4]`.
pub fn random_qparams(rng: &mut impl Rng, bits_range: std::ops::RangeInclusive<u32>) -> QuantParams {
    let bits = rng.random_range(bits_range);
    let m = mode(rng);
    let (lo, hi) = integer_range(bits, m).expect("bits in range");
    let zp = if rng.random_bool(0.5) { 0 } else { rng.random_range(lo..=hi) };
    let scale = 2f64.powf(rng.random_range(-6.0..2.0));
    QuantParams::new(scale, zp, bits, m).expect("valid parameters")
}

fn random_activation(rng: &mut impl Rng) -> Activation {
    match rng.random_range(0..4) {
        0 => Activation::Identity,
        1 => Activation::Relu,
        2 => Activation::HardSigmoid,
        _ => {
            let a: f64 = rng.random_range(-2.0..0.0);
            Activation::HardTanh { min_val: a, max_val: a + rng.random_range(0.1..3.0) }
        }
    }
}

/// Up to three real steps: batch norm (scalar or per channel), an activation,
/// an affine rescale, in random order and multiplicity.
pub fn random_real_steps(rng: &mut impl Rng, channels: usize) -> Vec<ChainStep> {
    (0..rng.random_range(0..=3))
        .map(|_| match rng.random_range(0..3) {
            0 => {
                let n = if rng.random_bool(0.5) { 1 } else { channels };
                let mut v = |lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
                ChainStep::BatchNorm(BatchNorm {
                    gamma: v(-2.0, 2.0),
                    beta: v(-1.0, 1.0),
                    running_mean: v(-1.0, 1.0),
                    running_var: v(0.01, 2.0),
                    epsilon: 1e-5,
                })
            }
            1 => ChainStep::Activation(random_activation(rng)),
            _ => ChainStep::AffineRescale { multiplier: rng.random_range(-3.0..3.0), offset: rng.random_range(-1.0..1.0) },
        })
        .collect()
}

/// Number of distinct code vectors for an input of `elements` values.
pub fn input_space(qparams: &QuantParams, elements: usize) -> Option<u64> {
    let (lo, hi) = qparams.range();
    ((hi - lo + 1) as u64).checked_pow(elements as u32)
}

/// Every input code vector in odometer order, or `None` above `limit`.
pub fn enumerate_inputs(spec: &InputSpec, limit: u64) -> Option<Vec<QTensor>> {
    let qp = spec.qparams?;
    let n: usize = spec.shape.iter().product();
    let total = input_space(&qp, n).filter(|&t| t <= limit)?;
    let (lo, hi) = qp.range();
    let mut codes = vec![lo; n];
    let mut out = Vec::with_capacity(total as usize);
    for _ in 0..total {
        out.push(QTensor::new(spec.shape.clone(), codes.clone(), qp).expect("codes in range"));
        for c in codes.iter_mut() {
            if *c < hi {
                *c += 1;
                break;
            }
            *c = lo;
        }
    }
    Some(out)
}

pub fn random_inputs(rng: &mut impl Rng, spec: &InputSpec, count: usize) -> Vec<QTensor> {
    let qp = spec.qparams.expect("quantized input");
    let (lo, hi) = qp.range();
    let n: usize = spec.shape.iter().product();
    (0..count)
        .map(|_| QTensor::new(spec.shape.clone(), (0..n).map(|_| rng.random_range(lo..=hi)).collect(), qp).expect("codes in range"))
        .collect()
}

fn random_weights(rng: &mut impl Rng, shape: Vec<usize>) -> QTensor {
    let qp = random_qparams(rng, 2..=4);
    let (lo, hi) = qp.range();
    let n = shape.iter().product();
    QTensor::new(shape, (0..n).map(|_| rng.random_range(lo..=hi)).collect(), qp).expect("codes in range")
}

fn random_op(rng: &mut impl Rng, shape: &[usize]) -> LinearOp {
    if let [c, h, w] = *shape {
        let small = h.min(w);
        match rng.random_range(0..3) {
            0 if small >= 2 => {
                let window = rng.random_range(1..=2.min(small));
                return LinearOp::AvgPool2d { window, stride: rng.random_range(1..=window) };
            }
            1 => {
                let k = rng.random_range(1..=2.min(small));
                return LinearOp::Conv2d(Conv2dGeometry {
                    in_channels: c,
                    out_channels: rng.random_range(1..=2),
                    kernel_h: k,
                    kernel_w: k,
                    stride: rng.random_range(1..=2),
                    padding: rng.random_range(0..=1),
                });
            }
            _ => {}
        }
    }
    LinearOp::FullyConnected { in_features: shape.iter().product(), out_features: rng.random_range(1..=4) }
}

/// A valid graph of one to three layers over a small input, with every kind
/// of linear op, chain step and terminal form. Inputs have at most 12 bits of
/// code space with probability about one half.
pub fn random_graph(rng: &mut impl Rng) -> GraphIR {
    let shape = if rng.random_bool(0.5) {
        vec![rng.random_range(1..=6)]
    } else {
        vec![rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3)]
    };
    let elements: usize = shape.iter().product();
    let input_bits_max = if elements <= 4 { 3 } else { 2 };
    let input_q = random_qparams(rng, 2..=input_bits_max);
    let layers = rng.random_range(1..=3);

    let mut nodes = Vec::new();
    let mut cur_shape = shape.clone();
    let mut cur_q = input_q;
    for l in 0..layers {
        let op = random_op(rng, &cur_shape);
        let out_shape = op.output_shape(&cur_shape).expect("op built for this shape");
        let channels = channel_count(&out_shape);
        let weights = op.expected_weight_shape().map(|s| random_weights(rng, s));
        let bias = if rng.random_bool(0.3) {
            vec![rng.random_range(-1.0..1.0); channels]
        } else {
            (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        nodes.push(Node::Linear(LinearNode { op, weights, bias, input_qparams: Some(cur_q) }));

        let mut steps = random_real_steps(rng, channels);
        let terminal = l + 1 == layers;
        let out_q = random_qparams(rng, 2..=4);
        match (terminal, rng.random_range(0..3)) {
            (false, _) | (true, 0) => steps.push(ChainStep::Quant(out_q)),
            (true, 1) => {
                steps.push(ChainStep::Quant(out_q));
                steps.extend(random_real_steps(rng, channels));
                steps.push(ChainStep::Dequant(out_q));
            }
            _ => {}
        }
        nodes.push(Node::Chain(UnivariateChain::new(steps)));
        cur_shape = out_shape;
        cur_q = out_q;
    }
    let g = GraphIR::new(InputSpec { shape, qparams: Some(input_q) }, nodes);
    debug_assert!(g.is_valid(), "{:?}", g.validate());
    g
}

/// Fully-connected graph with random `bits`-bit codes, each weight nonzero
/// with probability `density`; every layer, the last included, ends in a
/// lookup when `quantized_terminal`.
pub fn random_dense_graph(rng: &mut impl Rng, sizes: &[usize], bits: u32, mode: RangeMode, quantized_terminal: bool, density: f64) -> GraphIR {
    let act = QuantParams::symmetric(1.0, bits, mode).expect("valid bits");
    let (lo, hi) = act.range();
    let mut nodes = Vec::new();
    for (l, w) in sizes.windows(2).enumerate() {
        let wq = QuantParams::symmetric(1.0 / w[0] as f64, bits, mode).expect("valid bits");
        let codes = (0..w[0] * w[1]).map(|_| if rng.random_bool(density) { rng.random_range(lo..=hi) } else { 0 }).collect();
        let weights = QTensor::new(vec![w[1], w[0]], codes, wq).expect("codes in range");
        nodes.push(Node::Linear(crate::ir::fc_node(weights, vec![0.0; w[1]], act)));
        let terminal = l + 2 == sizes.len();
        let steps = if terminal && !quantized_terminal { vec![] } else { vec![ChainStep::Quant(act)] };
        nodes.push(Node::Chain(UnivariateChain::new(steps)));
    }
    GraphIR::new(InputSpec { shape: vec![sizes[0]], qparams: Some(act) }, nodes)
}

/// Two conv layers, average pooling and a classifier over a `1 x 8 x 8`
/// input, with Gaussian-ish random weights, plus a calibration set.
pub fn random_conv_model(rng: &mut impl Rng, calibration: usize) -> (FloatModel, Vec<Vec<f64>>) {
    let mut w = |n: usize, fan_in: usize| -> Vec<f64> {
        let b = (3.0 / fan_in as f64).sqrt();
        (0..n).map(|_| rng.random_range(-b..b)).collect()
    };
    let g1 = Conv2dGeometry { in_channels: 1, out_channels: 4, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 };
    let g2 = Conv2dGeometry { in_channels: 4, out_channels: 4, kernel_h: 3, kernel_w: 3, stride: 2, padding: 0 };
    let layers = vec![
        FloatLayer {
            linear: FloatLinear::Conv2d { geometry: g1, weights: w(36, 9), bias: w(4, 9) },
            post: vec![ChainStep::Activation(Activation::Relu)],
        },
        FloatLayer {
            linear: FloatLinear::Conv2d { geometry: g2, weights: w(144, 36), bias: w(4, 36) },
            post: vec![ChainStep::Activation(Activation::Relu)],
        },
        FloatLayer { linear: FloatLinear::AvgPool2d { window: 2, stride: 1 }, post: vec![] },
        FloatLayer {
            linear: FloatLinear::FullyConnected { in_features: 16, out_features: 5, weights: w(80, 16), bias: w(5, 16) },
            post: vec![],
        },
    ];
    let samples = (0..calibration).map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
    (FloatModel { input_shape: vec![1, 8, 8], layers }, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_graphs_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let g = random_graph(&mut rng);
            assert_eq!(g.validate(), vec![]);
        }
        let g = random_dense_graph(&mut rng, &[8, 4, 3], 2, RangeMode::Narrow, true, 1.0);
        assert!(g.is_valid());
    }

    #[test]
    fn enumeration_is_exhaustive_and_distinct() {
        let qp = QuantParams::new(1.0, 0, 2, RangeMode::Narrow).unwrap();
        let spec = InputSpec { shape: vec![3], qparams: Some(qp) };
        let all = enumerate_inputs(&spec, 4096).unwrap();
        assert_eq!(all.len(), 27);
        let set: std::collections::BTreeSet<Vec<i32>> = all.iter().map(|t| t.data().to_vec()).collect();
        assert_eq!(set.len(), 27);
        assert!(enumerate_inputs(&spec, 26).is_none());
    }
}
