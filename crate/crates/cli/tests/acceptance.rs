//! End-to-end acceptance checks, one PASS/FAIL line per criterion.
//!
//! MNIST is read from `$MNIST_DIR`, default `<workspace>/data/mnist`
//! (see `scripts/fetch_mnist.sh`).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use pbsnet::analysis::{count_pbs, pruning_curves, signed_bits, worst_case_accumulator_bits, AnalysisReport};
use pbsnet::crt::{crt_dot_accumulate, decode, encode, CrtBasis};
use pbsnet::eval::OutOfDomainPolicy;
use pbsnet::fusion::{compile, fuse_chain, CompileOptions, DomainMode, DotAccNode, FusedFunction};
use pbsnet::ir::{import_float_model, load_model, Activation, ChainStep, ImportOptions, LinearOp, UnivariateChain};
use pbsnet::quant::{QTensor, QuantParams, RangeMode};
use pbsnet::reference::reference_eval;
use pbsnet::sim::{inference_error_rate, run_batch, RunConfig};
use pbsnet::synth::{enumerate_inputs, random_conv_model, random_dense_graph, random_graph, random_inputs, random_qparams, random_real_steps};
use pbsnet_cli::{execute, Cli};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("data/mnist"))
}

fn cli(args: &[&str]) -> Result<String, String> {
    let parsed = Cli::try_parse_from(std::iter::once("pbsnet").chain(args.iter().copied())).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    execute(parsed.command, &mut out).map_err(|e| format!("pbsnet {}: {e}", args[0]))?;
    Ok(String::from_utf8(out).expect("utf-8 output"))
}

struct Row {
    accuracy: f64,
    bits: u32,
    circuit: PathBuf,
    model: PathBuf,
}

/// Trains, compiles, analyzes on the test split and evaluates with a
/// reference cross-check, all through the command-line entry points.
fn fcnn_row(dir: &Path, config: &str, tag: &str) -> Result<Row, String> {
    let data = mnist_dir();
    let data = data.to_str().unwrap();
    let model = dir.join(format!("{tag}.pbsn"));
    let circuit = dir.join(format!("{tag}.circ"));
    let config = workspace().join(config);
    let (m, c) = (model.to_str().unwrap(), circuit.to_str().unwrap());
    let metrics = dir.join(format!("{tag}.jsonl"));
    cli(&["train", "--config", config.to_str().unwrap(), "--data", data, "--out", m, "--metrics", metrics.to_str().unwrap()])?;
    cli(&["compile", "--model", m, "--data", data, "--out", c])?;
    let report: AnalysisReport = serde_json::from_str(&cli(&["analyze", "--circuit", c, "--data", data, "--format", "json"])?).map_err(|e| e.to_string())?;
    let eval: serde_json::Value = serde_json::from_str(&cli(&["eval", "--circuit", c, "--data", data, "--reference", m, "--format", "json"])?).map_err(|e| e.to_string())?;
    let accuracy = eval["accuracy"].as_f64().ok_or("eval printed no accuracy")?;
    let trained = load_model(&model).map_err(|e| e.to_string())?.metadata["test_accuracy"].clone();
    if format!("{accuracy:.6}") != trained {
        return Err(format!("circuit accuracy {accuracy:.6} differs from trainer-reported {trained}"));
    }
    if eval["reference_mismatches"].as_u64() != Some(0) {
        return Err(format!("reference mismatches: {}", eval["reference_mismatches"]));
    }
    Ok(Row { accuracy, bits: report.circuit_bit_width, circuit, model })
}

fn table_row(row: &Result<Row, String>, min_acc: f64, bits: std::ops::RangeInclusive<u32>) -> Check {
    let r = row.as_ref().map_err(Clone::clone)?;
    let detail = format!("accuracy {:.4} (need >= {min_acc:.3}), circuit_bit_width {} (need {:?})", r.accuracy, r.bits, bits);
    if r.accuracy >= min_acc && bits.contains(&r.bits) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn exactness(narrow: &Result<Row, String>) -> Check {
    let r = narrow.as_ref().map_err(|e| format!("no trained circuit: {e}"))?;
    let data = mnist_dir();
    let eval: serde_json::Value = serde_json::from_str(&cli(&[
        "eval",
        "--circuit",
        r.circuit.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--reference",
        r.model.to_str().unwrap(),
        "--policy",
        "strict",
        "--format",
        "json",
    ])?)
    .map_err(|e| e.to_string())?;
    let (samples, mismatches) = (eval["samples"].as_u64().unwrap_or(0), eval["reference_mismatches"].as_u64());
    if samples != 10_000 || mismatches != Some(0) {
        return Err(format!("{samples} test images, mismatches {mismatches:?}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut graphs, mut exhaustive, mut points) = (0, 0, 0usize);
    while graphs < 500 {
        let g = random_graph(&mut rng);
        let all = enumerate_inputs(&g.input, 1 << 12);
        exhaustive += usize::from(all.is_some());
        let inputs = all.unwrap_or_else(|| random_inputs(&mut rng, &g.input, 512));
        let mode = if graphs % 2 == 0 { DomainMode::WorstCase } else { DomainMode::Measured { margin: 0.0 } };
        let c = compile(&g, &inputs, &CompileOptions { mode, ..Default::default() }).map_err(|e| format!("graph {graphs}: {e}"))?;
        for (x, out) in inputs.iter().zip(run_batch(&c, &inputs, &RunConfig::default())) {
            let out = out.map_err(|e| format!("graph {graphs}: {e}"))?;
            if out.output != reference_eval(&g, x).map_err(|e| e.to_string())? {
                return Err(format!("graph {graphs} disagrees on input {:?}", x.data()));
            }
        }
        points += inputs.len();
        graphs += 1;
    }
    Ok(format!("10000/10000 MNIST test images identical; {graphs} random graphs ({exhaustive} exhaustive), {points} inputs, 0 mismatches"))
}

/// Chain evaluated step by step from the textbook definitions.
fn oracle(steps: &[ChainStep], channel: usize, x: f64) -> f64 {
    let pick = |v: &[f64]| if v.len() == 1 { v[0] } else { v[channel] };
    let mut v = x;
    for s in steps {
        v = match s {
            ChainStep::Dequant(p) => p.scale() * (v - p.zero_point() as f64),
            ChainStep::BatchNorm(bn) => {
                pick(&bn.gamma) * (v - pick(&bn.running_mean)) / (pick(&bn.running_var) + bn.epsilon).sqrt() + pick(&bn.beta)
            }
            ChainStep::Activation(Activation::Identity) => v,
            ChainStep::Activation(Activation::Relu) => v.max(0.0),
            ChainStep::Activation(Activation::HardSigmoid) => (v / 6.0 + 0.5).clamp(0.0, 1.0),
            ChainStep::Activation(Activation::HardTanh { min_val, max_val }) => v.clamp(*min_val, *max_val),
            ChainStep::AffineRescale { multiplier, offset } => multiplier * v + offset,
            ChainStep::Quant(p) => {
                let (lo, hi) = p.range();
                ((v / p.scale()).floor() + p.zero_point() as f64).clamp(lo as f64, hi as f64)
            }
        };
    }
    v
}

fn fusion_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut entries = 0usize;
    let triples = 200;
    for t in 0..triples {
        let channels = rng.random_range(1..=4);
        let scale = 2f64.powf(rng.random_range(-8.0..0.0));
        let bias = (0..channels).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f = FusedFunction { scale, bias };
        let mut steps = random_real_steps(&mut rng, channels);
        steps.push(ChainStep::Quant(random_qparams(&mut rng, 2..=6)));
        let lo = rng.random_range(-300..=0);
        let domain = (lo, lo + rng.random_range(0..=600));
        let tlu = fuse_chain(&f, &UnivariateChain::new(steps.clone()), domain, channels).map_err(|e| e.to_string())?;
        for ch in 0..channels {
            for (i, &got) in tlu.table(ch).iter().enumerate() {
                let acc = domain.0 + i as i64;
                let expect = oracle(&steps, ch, f.scale * acc as f64 + f.bias[ch]);
                if got as f64 != expect {
                    return Err(format!("triple {t}, channel {ch}, acc {acc}: table {got}, oracle {expect}"));
                }
                entries += 1;
            }
        }
    }
    Ok(format!("{triples} random triples, {entries} table entries equal the oracle"))
}

fn crt() -> Check {
    let basis = CrtBasis::default();
    let (lo, hi) = basis.range();
    for x in lo..=hi {
        let back = decode(&encode(x, &basis).map_err(|e| e.to_string())?, &basis).map_err(|e| e.to_string())?;
        if back != x {
            return Err(format!("decode(encode({x})) = {back}"));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 10_000;
    for t in 0..trials {
        let n = rng.random_range(1..=64);
        let xs: Vec<i64> = (0..n).map(|_| rng.random_range(-128..=127)).collect();
        let ws: Vec<i64> = (0..n).map(|_| rng.random_range(-4..=4)).collect();
        let plain: i64 = xs.iter().zip(&ws).map(|(x, w)| x * w).sum();
        if plain < lo || plain > hi {
            continue;
        }
        let enc: Vec<_> = xs.iter().map(|&x| encode(x, &basis)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
        let got = decode(&crt_dot_accumulate(&enc, &ws, &basis), &basis).map_err(|e| e.to_string())?;
        if got != plain {
            return Err(format!("trial {t}: CRT dot {got}, plain {plain}"));
        }
    }
    Ok(format!("{} values roundtrip; {trials} dot products match plain integers", hi - lo + 1))
}

fn reachable(weights: &[i64], input: (i64, i64)) -> (i64, i64) {
    let mut set = BTreeSet::from([0i64]);
    for &w in weights {
        set = set.iter().flat_map(|&s| (input.0..=input.1).map(move |x| s + w * x)).collect();
    }
    (*set.first().unwrap(), *set.last().unwrap())
}

fn sweep() -> Check {
    let counts: Vec<usize> = (1..=1024).collect();
    let curve = pruning_curves(2, &counts);
    if let Some(w) = curve.windows(2).find(|w| w[1].narrow_bits < w[0].narrow_bits || w[1].wide_bits < w[0].wide_bits) {
        return Err(format!("curve decreases at N = {}", w[1].active));
    }
    if let Some(p) = curve.iter().find(|p| p.narrow_bits > p.wide_bits) {
        return Err(format!("Narrow exceeds Wide at N = {}", p.active));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layers = 2000;
    for l in 0..layers {
        let bits = rng.random_range(2..=3);
        let mode = if rng.random_bool(0.5) { RangeMode::Narrow } else { RangeMode::Wide };
        let wq = QuantParams::symmetric(0.5, bits, mode).unwrap();
        let input = random_qparams(&mut rng, bits..=bits);
        let n = rng.random_range(1..=12);
        let (lo, hi) = wq.range();
        let codes: Vec<i32> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
        let w = QTensor::new(vec![1, n], codes.clone(), wq).unwrap();
        let node = DotAccNode::new(LinearOp::FullyConnected { in_features: n, out_features: 1 }, vec![n], input, Some(&w));
        let wc = worst_case_accumulator_bits(&node, &input);
        let truth = reachable(&codes.iter().map(|&c| c as i64).collect::<Vec<_>>(), input.centered_range());
        if wc.interval != truth || wc.bits != signed_bits(truth.0, truth.1) {
            return Err(format!("layer {l}: analyzer {:?}, enumeration {truth:?}", wc.interval));
        }
    }
    let at = |n: usize| curve[n - 1];
    Ok(format!(
        "monotone, Narrow <= Wide on 1..=1024 (N=150: {}/{} bits, N=90: {}/{}); {layers} layers match enumeration",
        at(150).narrow_bits,
        at(150).wide_bits,
        at(90).narrow_bits,
        at(90).wide_bits
    ))
}

fn error_injection() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_dense_graph(&mut rng, &[784, 192, 192, 10], 2, RangeMode::Narrow, true, 0.1);
    let inputs = random_inputs(&mut rng, &g.input, 6000);
    let c = compile(&g, &inputs, &CompileOptions::default()).map_err(|e| e.to_string())?;
    let n = count_pbs(&c);
    if n != 394 {
        return Err(format!("synthetic circuit has {n} lookups, expected 394"));
    }
    let p = 1e-3;
    let cfg = RunConfig { p_err: p, seed: 11, policy: OutOfDomainPolicy::Clamp, ..Default::default() };
    let runs: Vec<_> = run_batch(&c, &inputs, &cfg).into_iter().collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let lookups: u64 = runs.iter().map(|r| r.pbs).sum();
    let failures: u64 = runs.iter().map(|r| r.failures).sum();
    let (mean, sd) = (lookups as f64 * p, (lookups as f64 * p * (1.0 - p)).sqrt());
    let z1 = (failures as f64 - mean) / sd;

    let q = inference_error_rate(p, n);
    let observed = runs.iter().filter(|r| r.failures > 0).count() as f64 / runs.len() as f64;
    let z2 = (observed - q) / (q * (1.0 - q) / runs.len() as f64).sqrt();
    let detail = format!(
        "{failures} failures in {lookups} lookups (expected {mean:.0}, z = {z1:+.2}); inference error {observed:.4} vs predicted {q:.4} (z = {z2:+.2})"
    );
    if lookups >= 1_000_000 && z1.abs() <= 3.0 && z2.abs() <= 3.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn conv_import() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (model, calibration) = random_conv_model(&mut rng, 128);
    let g = import_float_model(&model, &calibration, ImportOptions::new(3, RangeMode::Narrow)).map_err(|e| e.to_string())?;
    let c = compile(&g, &[], &CompileOptions { mode: DomainMode::WorstCase, ..Default::default() }).map_err(|e| e.to_string())?;
    let inputs = random_inputs(&mut rng, &g.input, 100);
    for (i, (x, out)) in inputs.iter().zip(run_batch(&c, &inputs, &RunConfig::default())).enumerate() {
        if out.map_err(|e| e.to_string())?.output != reference_eval(&g, x).map_err(|e| e.to_string())? {
            return Err(format!("input {i} disagrees"));
        }
    }
    let convs = c.stages.iter().filter(|s| matches!(s.dot.op, LinearOp::Conv2d(_))).count();
    Ok(format!("{convs}-conv imported model ({} stages) exact on 100 random inputs", c.stages.len()))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    let narrow = fcnn_row(dir.path(), "configs/fcnn_narrow_cap150.toml", "narrow");
    let wide = fcnn_row(dir.path(), "configs/fcnn_wide_cap90.toml", "wide");
    let results: Vec<(u8, &str, Check)> = vec![
        (1, "FCNN 2/2 bits, Narrow, cap 150", table_row(&narrow, 0.90, 5..=7)),
        (2, "FCNN 2/2 bits, Wide, cap 90", table_row(&wide, 0.94, 6..=8)),
        (3, "exactness", exactness(&narrow)),
        (4, "fusion oracle", fusion_oracle()),
        (5, "CRT roundtrip and homomorphism", crt()),
        (6, "pruning sweep", sweep()),
        (7, "error-injection calibration", error_injection()),
        (8, "conv import exactness", conv_import()),
    ];
    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("PASS criterion {id} ({name}): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {d}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.0} s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
