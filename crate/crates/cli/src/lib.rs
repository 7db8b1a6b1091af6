//! Command-line experiment runner: training runs with optional dense
//! baselines, ablation sweeps, a codec benchmark and the speedup model.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use dgc_core::codec::{compression_ratio, decode, encode, SparseUpdate, DENSE_ELEMENT_BYTES};
use dgc_core::engine::SparsitySchedule;
use dgc_core::error::DgcError;
use dgc_core::kv::{parse_kv, ConfigError};
use dgc_core::perfmodel::{speedup_csv, speedup_table, PerfParams, SparseCollective};
use dgc_core::rng::{derive_stream, standard_normals, Purpose};
use dgc_core::sim::{train, Algorithm, TrainConfig, TrainReport};
use dgc_core::sparsify::{exact_threshold, keep_count, select, ScopeThreshold};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "dgc", version, about = "Sparse gradient exchange experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on virtual nodes and write trace.csv plus manifest.json.
    Train(TrainArgs),
    /// Encode a random gradient and report its compression ratio.
    BenchCodec(BenchArgs),
    /// Evaluate the speedup model for N = 1, 2, 4, ... up to max_nodes.
    Perf(PerfArgs),
    /// Train every combination of the listed sparsities and algorithms.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` training config.
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also run the dense arm with the same seed and schedule.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 25_000_000)]
    pub size: usize,
    #[arg(long, default_value_t = 0.999)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PerfArgs {
    /// Flat `key = value` parameter file.
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Final sparsities, comma separated. Warm-up stages above a target
    /// are dropped for that run.
    #[arg(long, value_delimiter = ',', default_value = "0.999")]
    pub sparsities: Vec<f64>,
    /// Algorithm names, comma separated.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "plain_sparse,vanilla_uncorrected,vanilla_corrected"
    )]
    pub algorithms: Vec<String>,
    #[arg(long)]
    pub baseline: bool,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::BenchCodec(a) => cmd_bench_codec(&a).map(|r| println!("{r}")),
        Command::Perf(a) => cmd_perf(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn load_train_config(path: &Path, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    let text = read_text(path)?;
    let mut cfg = TrainConfig::from_kv_text(&text).map_err(|source| CliError::Config {
        path: path.display().to_string(),
        source,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RunSummary {
    pub algorithm: String,
    pub iterations: usize,
    pub param_count: usize,
    /// Full-dataset training loss at the final weights.
    pub final_loss: f64,
    pub final_eval: f64,
    /// Last row of the trace's `loss` column.
    pub last_trace_loss: Option<f64>,
    /// Last non-empty value of the trace's `eval` column.
    pub last_trace_eval: Option<f64>,
    /// Mean over iterations of dense bytes over `bytes_per_node`.
    pub mean_compression_ratio: Option<f64>,
    /// Sum of `bytes_per_node` times the node count.
    pub total_bytes: usize,
    pub median_send_interval: Option<f64>,
    pub diverged_at: Option<usize>,
}

impl RunSummary {
    fn new(cfg: &TrainConfig, r: &TrainReport) -> Self {
        Self {
            algorithm: cfg.algorithm.name().to_string(),
            iterations: r.trace.len(),
            param_count: r.param_count,
            final_loss: r.final_loss,
            final_eval: r.final_eval,
            last_trace_loss: r.trace.last_loss(),
            last_trace_eval: r.trace.last_eval(),
            mean_compression_ratio: r.trace.mean_compression_ratio(r.param_count),
            total_bytes: r.trace.total_bytes(),
            median_send_interval: r.median_send_interval,
            diverged_at: r.diverged.map(|d| d.iteration),
        }
    }
}

#[derive(Debug, Serialize)]
struct TimingNote {
    t_compute: f64,
    bandwidth_bits_per_s: f64,
    latency_s: f64,
    note: &'static str,
}

const TIMING_NOTE: &str =
    "compute time is a declared constant, not a measurement; wallclock_est is modeled";

#[derive(Debug, Serialize)]
struct RunManifest {
    command: &'static str,
    /// Canonical config text; feeding it back reproduces the run.
    config: String,
    seed: u64,
    artifacts: Vec<String>,
    summary: RunSummary,
    baseline: Option<RunSummary>,
    timing: TimingNote,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn prepare_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))
}

/// Trains `cfg` into `dir`, returning the summary and artifact names.
fn train_into(cfg: &TrainConfig, dir: &Path, name: &str) -> Result<(RunSummary, String), CliError> {
    let report = train(cfg).map_err(|e| match e {
        // rejected before the first iteration
        DgcError::InvalidParameter(m) => CliError::Usage(m),
        e => runtime(e),
    })?;
    let file = format!("{name}.csv");
    write_file(&dir.join(&file), report.trace.to_csv())?;
    Ok((RunSummary::new(cfg, &report), file))
}

fn print_summary(label: &str, s: &RunSummary) {
    let ratio = s
        .mean_compression_ratio
        .map_or_else(|| "n/a".to_string(), |r| format!("{r:.1}"));
    println!(
        "{label}: {} iterations, final loss {:.6}, eval {:.4}, mean compression {ratio}, total bytes {}",
        s.iterations, s.final_loss, s.final_eval, s.total_bytes
    );
    if let Some(m) = s.median_send_interval {
        println!("{label}: median iterations between sends of a coordinate at final sparsity: {m}");
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = load_train_config(&a.config, a.seed)?;
    prepare_out(&a.out)?;
    let (summary, trace) = train_into(&cfg, &a.out, "trace")?;
    print_summary(cfg.algorithm.name(), &summary);
    let mut artifacts = vec![trace];
    let baseline = if a.baseline {
        let dense = TrainConfig {
            algorithm: cfg.algorithm.dense_counterpart(),
            ..cfg.clone()
        };
        let (s, file) = train_into(&dense, &a.out, "baseline")?;
        print_summary("baseline", &s);
        artifacts.push(file);
        Some(s)
    } else {
        None
    };
    artifacts.push("manifest.json".into());
    let diverged = summary
        .diverged_at
        .or(baseline.as_ref().and_then(|b| b.diverged_at));
    let manifest = RunManifest {
        command: "train",
        config: cfg.to_kv_text(),
        seed: cfg.seed,
        artifacts,
        summary,
        baseline,
        timing: TimingNote {
            t_compute: cfg.timing.t_compute,
            bandwidth_bits_per_s: cfg.timing.bandwidth,
            latency_s: cfg.timing.latency,
            note: TIMING_NOTE,
        },
    };
    write_manifest(&a.out, &manifest)?;
    match diverged {
        Some(it) => Err(CliError::Runtime(format!(
            "training diverged at iteration {it}"
        ))),
        None => Ok(()),
    }
}

fn write_manifest(out: &Path, manifest: &impl Serialize) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(manifest).map_err(runtime)?;
    write_file(&out.join("manifest.json"), json + "\n")
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub size: usize,
    pub kept: usize,
    pub dense_bytes: usize,
    pub encoded_bytes: usize,
    pub ratio: f64,
}

impl std::fmt::Display for BenchResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "size {} kept {} dense_bytes {} encoded_bytes {} ratio {:.3}",
            self.size, self.kept, self.dense_bytes, self.encoded_bytes, self.ratio
        )
    }
}

/// Top-k of a seeded Gaussian gradient, encoded and verified.
pub fn cmd_bench_codec(a: &BenchArgs) -> Result<BenchResult, CliError> {
    if a.size == 0 {
        return Err(CliError::Usage("size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&a.sparsity) {
        return Err(CliError::Usage(format!(
            "sparsity {} outside [0, 1)",
            a.sparsity
        )));
    }
    let dense = standard_normals(&mut derive_stream(a.seed, 0, 0, Purpose::Bench), a.size);
    let mags: Vec<f32> = dense.iter().map(|x| x.abs()).collect();
    let threshold = exact_threshold(&mags, a.sparsity).map_err(runtime)?;
    let budget = keep_count(a.size, a.sparsity);
    let chosen = select(&mags, ScopeThreshold { threshold, budget });
    let (idx, vals): (Vec<usize>, Vec<f32>) = (0..a.size)
        .filter(|&i| chosen.mask[i] && dense[i] != 0.0)
        .map(|i| (i, dense[i]))
        .unzip();
    let update = SparseUpdate::new(idx, vals, a.size).map_err(runtime)?;
    let encoded = encode(&update);
    let back = decode(&encoded).map_err(runtime)?;
    if back != update {
        return Err(runtime("codec round trip changed the update"));
    }
    let ratio = compression_ratio(a.size, &encoded).map_err(runtime)?;
    Ok(BenchResult {
        size: a.size,
        kept: update.nnz(),
        dense_bytes: a.size * DENSE_ELEMENT_BYTES,
        encoded_bytes: encoded.byte_len(),
        ratio: ratio.ratio,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerfRun {
    pub params: PerfParams,
    pub max_nodes: usize,
}

pub const DEFAULT_MAX_NODES: usize = 128;

/// Parameter file: an optional `preset` (default, alexnet, resnet50) whose
/// values the remaining keys override. Sizes are in megabytes (1e6 bytes)
/// and bandwidth in Gbps (1e9 bits/s).
pub fn parse_perf_params(text: &str) -> Result<PerfRun, ConfigError> {
    let entries = parse_kv(text)?;
    let mut params = PerfParams::default();
    if let Some(e) = entries.iter().find(|e| e.key == "preset") {
        params = match e.value.as_str() {
            "default" => PerfParams::default(),
            "alexnet" => PerfParams::alexnet_1gbps(),
            "resnet50" => PerfParams::resnet50_1gbps(),
            other => return Err(e.invalid(format!("unknown preset `{other}`"))),
        };
    }
    let mut max_nodes = DEFAULT_MAX_NODES;
    for e in &entries {
        match e.key.as_str() {
            "preset" => {}
            "t_compute" => params.t_compute = e.parse()?,
            "model_mb" => params.model_bytes = e.parse::<f64>()? * 1e6,
            "density" => params.density = e.parse()?,
            "bandwidth_gbps" => params.bandwidth = e.parse::<f64>()? * 1e9,
            "latency" => params.latency_per_round = e.parse()?,
            "codec_overhead" => params.codec_overhead = e.parse()?,
            "sparse_collective" => {
                params.sparse_collective = e.parse::<SparseCollective>()?;
            }
            "max_nodes" => max_nodes = e.parse()?,
            _ => return Err(e.unknown()),
        }
    }
    params
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if max_nodes == 0 {
        return Err(ConfigError::Invalid("max_nodes must be >= 1".into()));
    }
    Ok(PerfRun { params, max_nodes })
}

#[derive(Debug, Serialize)]
struct PerfManifest {
    command: &'static str,
    params: String,
    artifacts: Vec<String>,
    t_compute: f64,
    note: &'static str,
}

pub fn cmd_perf(a: &PerfArgs) -> Result<(), CliError> {
    let text = read_text(&a.params)?;
    let run = parse_perf_params(&text).map_err(|source| CliError::Config {
        path: a.params.display().to_string(),
        source,
    })?;
    prepare_out(&a.out)?;
    let rows = speedup_table(&run.params, run.max_nodes);
    let csv = speedup_csv(&rows);
    write_file(&a.out.join("speedup.csv"), &csv)?;
    print!("{csv}");
    write_manifest(
        &a.out,
        &PerfManifest {
            command: "perf",
            params: text,
            artifacts: vec!["speedup.csv".into(), "manifest.json".into()],
            t_compute: run.params.t_compute,
            note: TIMING_NOTE,
        },
    )
}

#[derive(Debug, Serialize)]
struct SweepRow {
    name: String,
    sparsity: f64,
    summary: RunSummary,
}

#[derive(Debug, Serialize)]
struct SweepManifest {
    command: &'static str,
    config: String,
    seed: u64,
    artifacts: Vec<String>,
    runs: Vec<SweepRow>,
    baseline: Option<RunSummary>,
}

pub const SWEEP_CSV_HEADER: &str =
    "algorithm,sparsity,final_loss,final_eval,mean_compression_ratio,total_bytes,trace";

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let base = load_train_config(&a.config, a.seed)?;
    let algorithms = a
        .algorithms
        .iter()
        .map(|s| {
            s.parse::<Algorithm>()
                .map_err(CliError::Usage)
                .and_then(|alg| match alg.variant() {
                    Some(_) => Ok(alg),
                    None => Err(CliError::Usage(format!(
                        "`{s}` is dense; use --baseline for the dense arm"
                    ))),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let schedules = a
        .sparsities
        .iter()
        .map(|&s| {
            let warmup = base
                .schedule
                .warmup()
                .iter()
                .copied()
                .filter(|&w| w <= s)
                .collect();
            SparsitySchedule::new(warmup, s).map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    prepare_out(&a.out)?;
    let mut csv = format!("{SWEEP_CSV_HEADER}\n");
    let mut runs = Vec::new();
    let mut artifacts = Vec::new();
    for (schedule, &sparsity) in schedules.iter().zip(&a.sparsities) {
        for &alg in &algorithms {
            let mut cfg = TrainConfig {
                algorithm: alg,
                schedule: schedule.clone(),
                ..base.clone()
            };
            cfg.selection.target_sparsity = sparsity;
            let name = format!("{}_s{sparsity}", alg.name());
            let (s, file) = train_into(&cfg, &a.out, &name)?;
            print_summary(&name, &s);
            csv += &format!(
                "{},{sparsity},{},{},{},{},{file}\n",
                alg.name(),
                s.final_loss,
                s.final_eval,
                s.mean_compression_ratio
                    .map_or_else(String::new, |r| r.to_string()),
                s.total_bytes
            );
            artifacts.push(file);
            runs.push(SweepRow {
                name,
                sparsity,
                summary: s,
            });
        }
    }
    let baseline = if a.baseline {
        let dense = TrainConfig {
            algorithm: base.algorithm.dense_counterpart(),
            ..base.clone()
        };
        let (s, file) = train_into(&dense, &a.out, "baseline")?;
        print_summary("baseline", &s);
        csv += &format!(
            "{},,{},{},,{},{file}\n",
            dense.algorithm.name(),
            s.final_loss,
            s.final_eval,
            s.total_bytes
        );
        artifacts.push(file);
        Some(s)
    } else {
        None
    };
    write_file(&a.out.join("sweep.csv"), csv)?;
    artifacts.extend(["sweep.csv".to_string(), "manifest.json".to_string()]);
    write_manifest(
        &a.out,
        &SweepManifest {
            command: "sweep",
            config: base.to_kv_text(),
            seed: base.seed,
            artifacts,
            runs,
            baseline,
        },
    )
}
