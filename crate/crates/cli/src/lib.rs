//! Command-line pipeline over the `pbsnet` library.
//!
//! Exit codes: 0 success, 1 internal error, 2 user or input error.

pub mod mnist;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pbsnet::analysis::{analyze_static, measure_with_threads, pruning_curves, AnalysisReport};
use pbsnet::eval::{OutOfDomainPolicy, OutputValues};
use pbsnet::fusion::{compile, load_circuit, save_circuit, CompileError, CompileOptions, CompiledCircuit, DomainMode, DEFAULT_MARGIN};
use pbsnet::ir::{load_model, save_model, GraphIR};
use pbsnet::quant::QTensor;
use pbsnet::reference::reference_eval;
use pbsnet::sim::{estimate_latency, format_trace, inference_error_rate, run_batch, run_sample, summarize_traces, CostModel, RunConfig, SimError};
use pbsnet::train::{train, EpochMetrics, TrainConfig, TrainError};

use mnist::{MnistDataset, MnistError, SplitTag};

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    User(anyhow::Error),
    Internal(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::User(e) | CliError::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

fn user(e: impl Into<anyhow::Error>) -> CliError {
    CliError::User(e.into())
}

fn internal(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Internal(e.into())
}

impl From<MnistError> for CliError {
    fn from(e: MnistError) -> Self {
        match e {
            MnistError::Io(..) => internal(e),
            _ => user(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Dataset(_) | TrainError::Diverged { .. } => user(e),
            _ => internal(e),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Crosscheck { .. } | SimError::Crt { .. } => internal(e),
            _ => user(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "pbsnet", version, about = "Quantized networks lowered to integer accumulation and table lookups")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for SplitTag {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => SplitTag::Train,
            SplitArg::Test => SplitTag::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Strict,
    Clamp,
}

impl From<PolicyArg> for OutOfDomainPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Strict => OutOfDomainPolicy::Strict,
            PolicyArg::Clamp => OutOfDomainPolicy::Clamp,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a fully-connected network with quantization-aware training.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines per-epoch metrics.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Lower a model to a circuit with sized lookup tables.
    Compile {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// MNIST directory for calibration; required unless `--worst-case`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        calibration_split: SplitArg,
        #[arg(long, default_value_t = 10_000)]
        calibration_samples: usize,
        /// Size table domains from worst-case bounds instead of calibration.
        #[arg(long)]
        worst_case: bool,
        #[arg(long, default_value_t = DEFAULT_MARGIN)]
        margin: f64,
    },
    /// Print the bit-width report of a circuit.
    Analyze {
        #[arg(long)]
        circuit: PathBuf,
        /// Measure on this MNIST directory instead of printing the stored report.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
    /// Classify one image and print the class scores.
    Run {
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 0.0)]
        p_err: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Accuracy, lookup count and latency estimate over a split.
    Eval {
        #[arg(long)]
        circuit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        p_err: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        threads: usize,
        #[arg(long, value_enum, default_value = "strict")]
        policy: PolicyArg,
        /// Count disagreements with reference evaluation of this model.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Recompute CRT accumulators in plain arithmetic.
        #[arg(long)]
        debug_crosscheck: bool,
        /// TOML cost model; the illustrative table is used otherwise.
        #[arg(long)]
        cost_model: Option<PathBuf>,
        /// Write per-node trace aggregates here.
        #[arg(long)]
        trace_out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
    /// Worst-case accumulator width against active connections.
    Sweep {
        #[arg(long, default_value_t = 2)]
        bits: u32,
        #[arg(long, default_value_t = 1024)]
        max: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: OutputFormat,
    },
}

pub fn main_with_args(args: impl IntoIterator<Item = std::ffi::OsString>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(cli.command, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Train { config, data, out: path, metrics, seed, epochs } => {
            let mut cfg = match config {
                Some(p) => TrainConfig::from_toml_str(&read_text(&p)?)?,
                None => TrainConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            let trained = train_command(&cfg, &data, &path, metrics.as_deref())?;
            writeln!(out, "test_accuracy: {:.4}", trained.1).map_err(internal)?;
            for w in &trained.0 {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Compile { model, out: path, data, calibration_split, calibration_samples, worst_case, margin } => {
            let graph = load_model(&model).map_err(user)?;
            let calibration = if worst_case {
                Vec::new()
            } else {
                let dir = data.ok_or_else(|| user(anyhow::anyhow!("--data is required for calibration unless --worst-case is given")))?;
                let mut d = mnist::load_split(&dir, calibration_split.into())?;
                d.truncate(calibration_samples);
                quantize_split(&graph.input, &d)?
            };
            let mode = if worst_case { DomainMode::WorstCase } else { DomainMode::Measured { margin } };
            let circuit = compile_with_report(&graph, &calibration, mode)?;
            save_circuit(&circuit, &path).map_err(internal)?;
            let report = circuit.report.as_ref().expect("report attached");
            writeln!(out, "circuit_bit_width: {}\ntotal_pbs: {}", report.circuit_bit_width, report.total_pbs).map_err(internal)?;
            Ok(())
        }
        Command::Analyze { circuit, data, split, limit, format } => {
            let c = load_circuit(&circuit).map_err(user)?;
            let report = match data {
                Some(dir) => {
                    let mut d = mnist::load_split(&dir, split.into())?;
                    if let Some(n) = limit {
                        d.truncate(n);
                    }
                    if d.is_empty() {
                        return Err(user(anyhow::anyhow!("dataset is empty")));
                    }
                    measure_with_threads(&c, &quantize_split(&c.input, &d)?, 0).map_err(internal)?
                }
                None => c.report.clone().unwrap_or_else(|| analyze_static(&c)),
            };
            write_report(out, &report, format)
        }
        Command::Run { circuit, data, index, split, p_err, seed } => {
            let c = load_circuit(&circuit).map_err(user)?;
            let d = mnist::load_split(&data, split.into())?;
            if index >= d.len() {
                return Err(user(anyhow::anyhow!("index {index} out of range for {} images", d.len())));
            }
            let x = c.input.quantize(&d.image_f64(index)).map_err(user)?;
            let cfg = RunConfig { p_err, seed, ..Default::default() };
            let r = run_sample(&c, &x, &cfg, index as u64)?;
            let scores: Vec<String> = match &r.output.values {
                OutputValues::Scores(s) => s.iter().map(|v| format!("{v:.6}")).collect(),
                OutputValues::Codes(c) => c.iter().map(|v| v.to_string()).collect(),
            };
            writeln!(out, "scores: [{}]\nargmax: {}\nlabel: {}\npbs: {}\nfailures: {}", scores.join(", "), r.output.argmax(), d.labels[index], r.pbs, r.failures)
                .map_err(internal)?;
            Ok(())
        }
        Command::Eval { circuit, data, split, limit, p_err, seed, threads, policy, reference, debug_crosscheck, cost_model, trace_out, format } => {
            let c = load_circuit(&circuit).map_err(user)?;
            let mut d = mnist::load_split(&data, split.into())?;
            if let Some(n) = limit {
                d.truncate(n);
            }
            let reference = reference.map(|p| load_model(&p).map_err(user)).transpose()?;
            let cost = match cost_model {
                Some(p) => CostModel::load(&p).map_err(user)?,
                None => CostModel::illustrative(),
            };
            let cfg = RunConfig { p_err, seed, threads, policy: policy.into(), debug_crosscheck, trace: trace_out.is_some() };
            let summary = eval_circuit(&c, &d, &cfg, reference.as_ref(), &cost)?;
            if let (Some(path), Some(text)) = (&trace_out, &summary.trace) {
                std::fs::write(path, text).map_err(|e| internal(anyhow::anyhow!("{}: {e}", path.display())))?;
            }
            match format {
                OutputFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&summary.json()).map_err(internal)?),
                OutputFormat::Text => write!(out, "{}", summary.text()),
            }
            .map_err(internal)
        }
        Command::Sweep { bits, max, format } => {
            if !(2..=8).contains(&bits) || max == 0 {
                return Err(user(anyhow::anyhow!("need bits in [2, 8] and max >= 1")));
            }
            let counts: Vec<usize> = (1..=max).collect();
            let curve = pruning_curves(bits, &counts);
            match format {
                OutputFormat::Json => writeln!(out, "{}", serde_json::to_string(&curve).map_err(internal)?),
                OutputFormat::Text => {
                    let mut s = String::from("active narrow_bits wide_bits\n");
                    for p in &curve {
                        s.push_str(&format!("{} {} {}\n", p.active, p.narrow_bits, p.wide_bits));
                    }
                    write!(out, "{s}")
                }
            }
            .map_err(internal)
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| user(anyhow::anyhow!("cannot read {}: {e}", path.display())))
}

/// Trains, writes the model and the metrics log, and returns the trainer
/// warnings and the exported model's test accuracy.
pub fn train_command(cfg: &TrainConfig, data: &Path, out: &Path, metrics: Option<&Path>) -> CliResult<(Vec<String>, f64)> {
    let dataset = mnist::load_dataset(data)?;
    let mut log = match metrics {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| user(anyhow::anyhow!("cannot create {}: {e}", p.display())))?),
        None => None,
    };
    let mut log_err = None;
    let trained = train(cfg, &dataset, |m: &EpochMetrics| {
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(f, "{}", serde_json::to_string(m).expect("metrics serialize")) {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_err {
        return Err(internal(e));
    }
    save_model(&trained.graph, out).map_err(internal)?;
    Ok((trained.warnings, trained.test_accuracy))
}

pub fn quantize_split(input: &pbsnet::ir::InputSpec, d: &MnistDataset) -> CliResult<Vec<QTensor>> {
    (0..d.len()).map(|i| input.quantize(&d.image_f64(i)).map_err(user)).collect()
}

/// Compiles and attaches the measured (or static) report.
pub fn compile_with_report(graph: &GraphIR, calibration: &[QTensor], mode: DomainMode) -> CliResult<CompiledCircuit> {
    let options = CompileOptions { mode, ..Default::default() };
    let mut circuit = compile(graph, calibration, &options).map_err(|e| match e {
        CompileError::Invalid(_) | CompileError::EmptyCalibration | CompileError::Fusion { .. } | CompileError::Calibration { .. } => user(e),
    })?;
    let report = if calibration.is_empty() { analyze_static(&circuit) } else { measure_with_threads(&circuit, calibration, 0).map_err(internal)? };
    circuit.report = Some(report);
    Ok(circuit)
}

fn write_report(out: &mut dyn Write, report: &AnalysisReport, format: OutputFormat) -> CliResult<()> {
    match format {
        OutputFormat::Json => writeln!(out, "{}", report.to_json()),
        OutputFormat::Text => write!(out, "{}", report.to_text()),
    }
    .map_err(internal)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub samples: usize,
    pub correct: usize,
    pub pbs_per_inference: u64,
    pub failures: u64,
    pub lookups: u64,
    pub latency_ms: f64,
    pub cost_label: String,
    pub inference_error_rate: f64,
    /// Outputs differing from reference evaluation, when a model was given.
    pub mismatches: Option<usize>,
    pub trace: Option<String>,
}

impl EvalSummary {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples.max(1) as f64
    }

    fn json(&self) -> serde_json::Value {
        serde_json::json!({
            "samples": self.samples,
            "accuracy": self.accuracy(),
            "pbs_per_inference": self.pbs_per_inference,
            "lookups": self.lookups,
            "failures": self.failures,
            "estimated_latency_ms": self.latency_ms,
            "cost_model": self.cost_label,
            "inference_error_rate": self.inference_error_rate,
            "reference_mismatches": self.mismatches,
        })
    }

    fn text(&self) -> String {
        let mut s = format!(
            "samples: {}\naccuracy: {:.4}\npbs_per_inference: {}\nlookups: {}\nfailures: {}\nestimated_latency_ms: {:.1} ({})\ninference_error_rate: {:.3e}\n",
            self.samples,
            self.accuracy(),
            self.pbs_per_inference,
            self.lookups,
            self.failures,
            self.latency_ms,
            self.cost_label,
            self.inference_error_rate
        );
        if let Some(m) = self.mismatches {
            s.push_str(&format!("reference_mismatches: {m}\n"));
        }
        s
    }
}

pub fn eval_circuit(c: &CompiledCircuit, d: &MnistDataset, cfg: &RunConfig, reference: Option<&GraphIR>, cost: &CostModel) -> CliResult<EvalSummary> {
    if d.is_empty() {
        return Err(user(anyhow::anyhow!("dataset is empty")));
    }
    let inputs = quantize_split(&c.input, d)?;
    let runs: Vec<_> = run_batch(c, &inputs, cfg).into_iter().collect::<Result<_, _>>()?;
    let mut correct = 0;
    let (mut lookups, mut failures) = (0u64, 0u64);
    for (r, &y) in runs.iter().zip(&d.labels) {
        correct += usize::from(r.output.argmax() == y as usize);
        lookups += r.pbs;
        failures += r.failures;
    }
    let mismatches = match reference {
        Some(g) => {
            let mut n = 0;
            for (x, r) in inputs.iter().zip(&runs) {
                let expect = reference_eval(g, x).map_err(user)?;
                n += usize::from(expect != r.output);
            }
            Some(n)
        }
        None => None,
    };
    let trace = cfg.trace.then(|| {
        let traces: Vec<_> = runs.iter().map(|r| r.trace.clone().expect("trace requested")).collect();
        format_trace(&summarize_traces(c, &traces))
    });
    let latency = estimate_latency(c, cost, cfg.threads.max(1))?;
    Ok(EvalSummary {
        samples: d.len(),
        correct,
        pbs_per_inference: latency.pbs,
        failures,
        lookups,
        latency_ms: latency.milliseconds,
        cost_label: cost.label.clone(),
        inference_error_rate: inference_error_rate(cfg.p_err, latency.pbs),
        mismatches,
        trace,
    })
}
