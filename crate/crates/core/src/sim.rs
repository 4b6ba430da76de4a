//! Exact execution of compiled circuits with optional PBS failure injection.
//!
//! Failure model: each table lookup fails independently with probability
//! `p_err`; a CRT lookup draws once per residue. A failed lookup reads the
//! table at `x + δ`, `δ` uniform in `{-2, -1, 1, 2}`, clamped to the domain.
//! Randomness for sample `s` comes from one ChaCha8 stream selected by `s`,
//! consumed in lookup order, so results do not depend on scheduling.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crt::{crt_dot_accumulate, crt_tlu, decode, encode, CrtError, TluOutput};
use crate::eval::{EvalError, InferenceOutput, OutOfDomainPolicy, OutputValues, StageTrace};
use crate::fusion::{CompiledCircuit, Encoding, Stage};
use crate::ir::{channel_of, LinearOp};
use crate::quant::QTensor;

const SHIFTS: [i64; 4] = [-2, -1, 1, 2];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub p_err: f64,
    pub seed: u64,
    pub policy: OutOfDomainPolicy,
    /// Worker count for batch runs; 0 uses the global pool.
    pub threads: usize,
    /// Recompute CRT accumulators in plain arithmetic and compare.
    pub debug_crosscheck: bool,
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { p_err: 0.0, seed: 0, policy: OutOfDomainPolicy::Strict, threads: 0, debug_crosscheck: false, trace: false }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("p_err must lie in [0, 1), got {0}")]
    BadProbability(f64),
    #[error("sample {sample}: {source}")]
    Input { sample: u64, source: EvalError },
    #[error("sample {sample}: accumulator {value} at node {node} (element {element}) is outside the table domain [{lo}, {hi}]")]
    OutOfDomain { sample: u64, node: usize, element: usize, value: i64, lo: i64, hi: i64 },
    #[error("sample {sample}: CRT accumulator at node {node} disagrees with plain arithmetic")]
    Crosscheck { sample: u64, node: usize },
    #[error("sample {sample}: {source}")]
    Crt { sample: u64, source: CrtError },
    #[error("no cost for {0}-bit lookups")]
    MissingCost(u32),
    #[error("invalid cost model: {0}")]
    CostModel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub output: InferenceOutput,
    pub trace: Option<Vec<StageTrace>>,
    /// Lookups performed, counting every CRT residue.
    pub pbs: u64,
    pub failures: u64,
}

struct Injector {
    p: f64,
    rng: Option<ChaCha8Rng>,
    pbs: u64,
    failures: u64,
}

impl Injector {
    fn new(cfg: &RunConfig, sample: u64) -> Self {
        let rng = (cfg.p_err > 0.0).then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
            r.set_stream(sample);
            r
        });
        Self { p: cfg.p_err, rng, pbs: 0, failures: 0 }
    }

    /// Charges `draws` lookups and returns the index shift, if any failed.
    fn shift(&mut self, draws: usize) -> Option<i64> {
        self.pbs += draws as u64;
        let rng = self.rng.as_mut()?;
        let mut failed = false;
        for _ in 0..draws {
            if rng.random::<f64>() < self.p {
                self.failures += 1;
                failed = true;
            }
        }
        failed.then(|| SHIFTS[rng.random_range(0..SHIFTS.len())])
    }
}

pub fn run(circuit: &CompiledCircuit, input: &QTensor, cfg: &RunConfig) -> Result<RunOutput, SimError> {
    run_sample(circuit, input, cfg, 0)
}

/// Runs one input using the random stream of `sample`.
pub fn run_sample(circuit: &CompiledCircuit, input: &QTensor, cfg: &RunConfig, sample: u64) -> Result<RunOutput, SimError> {
    if !(0.0..1.0).contains(&cfg.p_err) {
        return Err(SimError::BadProbability(cfg.p_err));
    }
    let in_err = |source| SimError::Input { sample, source };
    if input.shape() != circuit.input.shape.as_slice() {
        return Err(in_err(EvalError::ShapeMismatch { expected: circuit.input.shape.clone(), found: input.shape().to_vec() }));
    }
    if circuit.input.qparams.as_ref() != Some(input.qparams()) {
        return Err(in_err(EvalError::InputParamsMismatch));
    }

    let mut inj = Injector::new(cfg, sample);
    let mut trace = cfg.trace.then(Vec::new);
    let mut codes: Vec<i32> = input.data().to_vec();
    let last = circuit.stages.len() - 1;

    for (si, stage) in circuit.stages.iter().enumerate() {
        let acc = accumulate(circuit, stage, si, &codes, cfg, sample)?;
        let tlu_node = 2 * si + 1;

        let out_codes = match &stage.tlu {
            None => None,
            Some(tlu) => {
                let draws = match stage.encoding {
                    Encoding::Native => 1,
                    Encoding::Crt => circuit.basis.residue_count(),
                };
                let mut out = Vec::with_capacity(acc.len());
                for (k, &a) in acc.iter().enumerate() {
                    let ch = channel_of(&stage.dot.output_shape, k);
                    if !(tlu.domain_lo..=tlu.domain_hi).contains(&a) && cfg.policy == OutOfDomainPolicy::Strict {
                        return Err(SimError::OutOfDomain {
                            sample,
                            node: tlu_node,
                            element: k,
                            value: a,
                            lo: tlu.domain_lo,
                            hi: tlu.domain_hi,
                        });
                    }
                    let v = match inj.shift(draws) {
                        Some(d) => {
                            let x = a.clamp(tlu.domain_lo, tlu.domain_hi) + d;
                            tlu.table(ch)[(x.clamp(tlu.domain_lo, tlu.domain_hi) - tlu.domain_lo) as usize]
                        }
                        None if stage.encoding == Encoding::Crt => {
                            let enc = encode(a, &circuit.basis).map_err(|source| SimError::Crt { sample, source })?;
                            match crt_tlu(&enc, tlu.table(ch), tlu.domain_lo, &circuit.basis, false, cfg.policy)
                                .map_err(|source| SimError::Crt { sample, source })?
                            {
                                TluOutput::Native(v) => v,
                                TluOutput::Crt(_) => unreachable!("lookup does not re-encode"),
                            }
                        }
                        None => tlu.lookup(ch, a, cfg.policy).expect("domain checked above"),
                    };
                    out.push(v);
                }
                Some(out)
            }
        };

        if let Some(t) = trace.as_mut() {
            t.push(StageTrace { accumulators: acc.clone(), outputs: out_codes.clone() });
        }

        if si == last {
            let values = match (&out_codes, stage.clear.steps.is_empty()) {
                (Some(c), true) => OutputValues::Codes(c.clone()),
                (Some(c), false) => OutputValues::Scores(
                    c.iter()
                        .enumerate()
                        .map(|(k, &q)| stage.clear.apply(channel_of(&stage.dot.output_shape, k), q as f64))
                        .collect::<Result<_, _>>()
                        .map_err(|e| in_err(e.into()))?,
                ),
                (None, _) => OutputValues::Scores(
                    acc.iter()
                        .enumerate()
                        .map(|(k, &a)| {
                            let ch = channel_of(&stage.dot.output_shape, k);
                            stage.clear.apply(ch, stage.f.value(ch, a))
                        })
                        .collect::<Result<_, _>>()
                        .map_err(|e| in_err(e.into()))?,
                ),
            };
            let output = InferenceOutput { shape: stage.dot.output_shape.clone(), accumulators: acc, values };
            return Ok(RunOutput { output, trace, pbs: inj.pbs, failures: inj.failures });
        }
        codes = out_codes.expect("non-terminal stages end in a lookup");
    }
    unreachable!("circuit has at least one stage")
}

fn accumulate(circuit: &CompiledCircuit, stage: &Stage, si: usize, codes: &[i32], cfg: &RunConfig, sample: u64) -> Result<Vec<i64>, SimError> {
    let dot = &stage.dot;
    if stage.encoding == Encoding::Native {
        return Ok(dot.accumulate(codes));
    }
    let basis = &circuit.basis;
    let crt_err = |source| SimError::Crt { sample, source };
    let zx = dot.input_qparams.zero_point();
    let encoded = codes.iter().map(|&q| encode((q - zx) as i64, basis)).collect::<Result<Vec<_>, _>>().map_err(crt_err)?;
    let mut out = Vec::with_capacity(dot.outputs());
    for k in 0..dot.outputs() {
        let (xs, ws): (Vec<_>, Vec<i64>) = dot.connections_of(k).map(|(i, w)| (encoded[i].clone(), w as i64)).unzip();
        out.push(decode(&crt_dot_accumulate(&xs, &ws, basis), basis).map_err(crt_err)?);
    }
    if cfg.debug_crosscheck && out != dot.accumulate(codes) {
        return Err(SimError::Crosscheck { sample, node: 2 * si });
    }
    Ok(out)
}

/// Runs every input, sample `i` on random stream `i`.
pub fn run_batch(circuit: &CompiledCircuit, inputs: &[QTensor], cfg: &RunConfig) -> Vec<Result<RunOutput, SimError>> {
    crate::par::with_threads(cfg.threads, || crate::par::map_slice(inputs, |i, x| run_sample(circuit, x, cfg, i as u64)))
}

/// Sequential reference of [`run_batch`], for benchmarks and schedule checks.
pub fn run_batch_sequential(circuit: &CompiledCircuit, inputs: &[QTensor], cfg: &RunConfig) -> Vec<Result<RunOutput, SimError>> {
    inputs.iter().enumerate().map(|(i, x)| run_sample(circuit, x, cfg, i as u64)).collect()
}

/// Checks every traced accumulator against a dense recomputation from the
/// traced inputs and stored weights. Returns the first failing stage.
pub fn verify_trace(circuit: &CompiledCircuit, input: &QTensor, trace: &[StageTrace]) -> Result<(), usize> {
    let mut codes = input.data().to_vec();
    for (si, (stage, t)) in circuit.stages.iter().zip(trace).enumerate() {
        let zx = stage.dot.input_qparams.zero_point() as i64;
        let expect: Vec<i64> = match stage.dot.op {
            LinearOp::FullyConnected { in_features, .. } => stage
                .dot
                .weights
                .chunks_exact(in_features)
                .map(|row| row.iter().zip(&codes).map(|(&w, &q)| w as i64 * (q as i64 - zx)).sum())
                .collect(),
            _ => stage.dot.accumulate(&codes),
        };
        if expect != t.accumulators {
            return Err(si);
        }
        match &t.outputs {
            Some(o) => codes = o.clone(),
            None if si + 1 < circuit.stages.len() => return Err(si),
            None => {}
        }
    }
    Ok(())
}

/// `1 - (1 - p)^n`, the probability that at least one of `n` lookups fails.
pub fn inference_error_rate(p_err_per_pbs: f64, pbs_count: u64) -> f64 {
    -(pbs_count as f64 * (-p_err_per_pbs).ln_1p()).exp_m1()
}

/// Per-lookup failure probability that keeps a full inference of
/// `pbs_count` lookups at failure rate `target`.
pub fn per_pbs_budget(target: f64, pbs_count: u64) -> f64 {
    -((-target).ln_1p() / pbs_count as f64).exp_m1()
}

/// Per-lookup cost in milliseconds by input bit-width (index 0 is 1 bit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    #[serde(default)]
    pub label: String,
    pub pbs_ms: Vec<f64>,
}

impl CostModel {
    /// Shipped default; illustrative only, not a measurement.
    pub fn illustrative() -> Self {
        Self {
            label: "illustrative, non-normative".into(),
            pbs_ms: vec![6.0, 7.0, 9.0, 12.0, 16.0, 24.0, 40.0, 80.0],
        }
    }

    pub fn uniform(ms: f64) -> Self {
        Self { label: "uniform".into(), pbs_ms: vec![ms; 8] }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.pbs_ms.is_empty() {
            return Err(SimError::CostModel("no costs".into()));
        }
        if self.pbs_ms.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
            return Err(SimError::CostModel("costs must be positive".into()));
        }
        if self.pbs_ms.windows(2).any(|w| w[1] < w[0]) {
            return Err(SimError::CostModel("costs must be non-decreasing in bit-width".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let m: CostModel = toml::from_str(text).map_err(|e| SimError::CostModel(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| SimError::CostModel(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    pub fn cost(&self, bits: u32) -> Result<f64, SimError> {
        (bits as usize).checked_sub(1).and_then(|i| self.pbs_ms.get(i)).copied().ok_or(SimError::MissingCost(bits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyEstimate {
    pub milliseconds: f64,
    pub pbs: u64,
}

/// Sum of lookup costs divided by `thread_count`; CRT lookups are charged per
/// residue at the residue's width.
pub fn estimate_latency(circuit: &CompiledCircuit, cost: &CostModel, thread_count: usize) -> Result<LatencyEstimate, SimError> {
    let mut ms = 0.0;
    let mut pbs = 0u64;
    for stage in circuit.stages.iter().filter(|s| s.tlu.is_some()) {
        let n = stage.dot.outputs() as u64;
        match stage.encoding {
            Encoding::Native => {
                ms += n as f64 * cost.cost(stage.bits())?;
                pbs += n;
            }
            Encoding::Crt => {
                for i in 0..circuit.basis.residue_count() {
                    ms += n as f64 * cost.cost(circuit.basis.residue_bits(i))?;
                }
                pbs += n * circuit.basis.residue_count() as u64;
            }
        }
    }
    Ok(LatencyEstimate { milliseconds: ms / thread_count.max(1) as f64, pbs })
}

/// Aggregate of traced integers at one (node, channel): circuit node `2i` is
/// the accumulator of stage `i`, `2i + 1` its lookup output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub node: usize,
    pub channel: usize,
    pub count: u64,
    pub min: i64,
    pub max: i64,
    pub hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(hash: u64, v: i64) -> u64 {
    v.to_le_bytes().iter().fold(hash, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn summarize_traces(circuit: &CompiledCircuit, traces: &[Vec<StageTrace>]) -> Vec<TraceRecord> {
    let mut records = Vec::new();
    for (si, stage) in circuit.stages.iter().enumerate() {
        let channels = stage.dot.channels();
        for (node, pick) in [(2 * si, false), (2 * si + 1, true)] {
            if pick && stage.tlu.is_none() {
                continue;
            }
            let mut recs: Vec<TraceRecord> = (0..channels)
                .map(|channel| TraceRecord { node, channel, count: 0, min: i64::MAX, max: i64::MIN, hash: FNV_OFFSET })
                .collect();
            for t in traces {
                let st = &t[si];
                let values: Vec<i64> = if pick {
                    st.outputs.as_ref().map(|o| o.iter().map(|&v| v as i64).collect()).unwrap_or_default()
                } else {
                    st.accumulators.clone()
                };
                for (k, v) in values.into_iter().enumerate() {
                    let r = &mut recs[channel_of(&stage.dot.output_shape, k)];
                    r.count += 1;
                    r.min = r.min.min(v);
                    r.max = r.max.max(v);
                    r.hash = fnv(r.hash, v);
                }
            }
            records.extend(recs);
        }
    }
    records
}

pub fn format_trace(records: &[TraceRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let kind = if r.node % 2 == 0 { "acc" } else { "tlu" };
        s.push_str(&format!(
            "node={} kind={kind} channel={} count={} min={} max={} hash={:016x}\n",
            r.node, r.channel, r.count, r.min, r.max, r.hash
        ));
    }
    s
}
