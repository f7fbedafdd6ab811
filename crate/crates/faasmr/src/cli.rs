//! Command-line surface.
//!
//! `plan` splits a dataset manifest and prints the plan as JSON. `run`
//! executes one workload on the chosen backend and writes `summary.json`
//! plus `traces.csv`. `sweep` repeats a run over a list of partition counts
//! and adds `speedup.csv`. `report` post-processes a traces file into the
//! figure-equivalent CSV products. The hidden `worker` subcommand is the
//! entrypoint of pooled worker processes used by the local backend.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::client::{self, PartitionOutcome, RunConfig, RunResult};
use crate::dataset::DatasetDescriptor;
use crate::monitor::{us_to_ms, RunMeasurement};
use crate::payload::Header;
use crate::planner::build_plan;
use crate::platform::local::{LocalBackend, LocalBackendOptions, WorkerProcessOptions};
use crate::platform::sim::{CostModel, SimBackend};
use crate::platform::{Backend, PlatformConfig};
use crate::report;
use crate::result::FinalValue;
use crate::storage::DataSourceConfig;
use crate::workloads::{self, CpuBoundParams, PpsLikeParams, WorkloadPreset};

#[derive(Parser)]
#[command(name = "faasmr", version, about = "Serverless map-reduce engine for columnar datasets")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a dataset manifest into cluster-aligned ranges and print the
    /// plan as JSON.
    Plan(PlanArgs),
    /// Execute one workload and write summary.json + traces.csv.
    Run(RunArgs),
    /// Run the partition-count sweep and write speedup.csv as well.
    Sweep(SweepArgs),
    /// Derive figure-equivalent CSV products from a traces file.
    Report(ReportArgs),
    /// Worker-process entrypoint (spawned by the local backend).
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    npartitions: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WorkloadName {
    #[value(name = "cpu_bound")]
    CpuBound,
    #[value(name = "pps_like")]
    PpsLike,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendName {
    Sim,
    Local,
}

#[derive(Args, Clone)]
struct WorkloadArgs {
    #[arg(long, value_enum)]
    workload: WorkloadName,
    /// Seed for the synthetic data and all platform jitter.
    #[arg(long)]
    seed: Option<u64>,
    /// Total entries (cpu_bound).
    #[arg(long)]
    entries: Option<u64>,
    /// Entries per cluster (cpu_bound).
    #[arg(long)]
    cluster_span: Option<u64>,
    /// File count (pps_like).
    #[arg(long)]
    files: Option<u32>,
    #[arg(long)]
    clusters_per_file: Option<u32>,
    #[arg(long)]
    bytes_per_cluster: Option<u64>,
    #[arg(long)]
    entries_per_cluster: Option<u64>,
    /// Pass fraction of the first selection cut (pps_like), in (0, 1].
    #[arg(long)]
    selectivity: Option<f64>,
    /// Simulator cost model: virtual CPU microseconds per entry.
    #[arg(long)]
    per_entry_cost_us: Option<f64>,
}

impl WorkloadArgs {
    fn build(&self) -> WorkloadPreset {
        let seed = self.seed.unwrap_or(42);
        match self.workload {
            WorkloadName::CpuBound => {
                let mut p = CpuBoundParams { seed, ..Default::default() };
                if let Some(v) = self.entries {
                    p.entries = v;
                }
                if let Some(v) = self.cluster_span {
                    p.cluster_span = v;
                }
                if let Some(v) = self.per_entry_cost_us {
                    p.per_entry_cpu_us = v;
                }
                workloads::cpu_bound(&p)
            }
            WorkloadName::PpsLike => {
                let mut p = PpsLikeParams { seed, ..Default::default() };
                if let Some(v) = self.files {
                    p.files = v;
                }
                if let Some(v) = self.clusters_per_file {
                    p.clusters_per_file = v;
                }
                if let Some(v) = self.bytes_per_cluster {
                    p.bytes_per_cluster = v;
                }
                if let Some(v) = self.entries_per_cluster {
                    p.entries_per_cluster = v;
                }
                if let Some(v) = self.selectivity {
                    p.selectivity = v;
                }
                if let Some(v) = self.per_entry_cost_us {
                    p.per_entry_cpu_us = v;
                }
                workloads::pps_like(&p)
            }
        }
    }
}

#[derive(Args, Clone)]
struct ExecArgs {
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendName,
    /// Access token for token-gated datasets.
    #[arg(long)]
    token: Option<String>,
    /// Platform/source configuration file (TOML or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    /// Containers to pre-warm before the measured run.
    #[arg(long, default_value_t = 0)]
    warmup: u32,
    #[arg(long)]
    run_id: Option<String>,
    /// Worker processes for the local backend (capped by the concurrency
    /// limit).
    #[arg(long)]
    local_workers: Option<usize>,
    /// Override: new invocations admitted per second (0 disables the
    /// throttle).
    #[arg(long)]
    rate_limit: Option<f64>,
    #[arg(long)]
    cold_start_ms: Option<u64>,
    #[arg(long)]
    warm_start_ms: Option<u64>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    service_jitter: Option<f64>,
    #[arg(long)]
    start_jitter_max_ms: Option<u64>,
    #[arg(long)]
    sampling_ms: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    #[arg(long)]
    npartitions: u32,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    workload: WorkloadArgs,
    /// Comma-separated partition counts.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256,512")]
    partitions: Vec<u32>,
    #[command(flatten)]
    exec: ExecArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Traces CSV produced by `run` or `sweep`.
    #[arg(long)]
    traces: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Aggregation bucket width.
    #[arg(long, default_value_t = 1_000)]
    bucket_ms: u64,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    connect: String,
    #[arg(long)]
    store_root: PathBuf,
    #[arg(long)]
    source_config: PathBuf,
}

/// File-based configuration: platform behaviour plus data-source model.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub platform: PlatformConfig,
    pub source: DataSourceConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }
}

pub fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Plan(args) => cmd_plan(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Report(args) => cmd_report(&args),
        Command::Worker(args) => cmd_worker(&args),
    }
}

fn cmd_plan(args: &PlanArgs) -> anyhow::Result<()> {
    let dataset = DatasetDescriptor::load_manifest(&args.manifest)
        .with_context(|| format!("loading manifest {}", args.manifest.display()))?;
    let plan = build_plan(&dataset, args.npartitions)?;
    let mut out = serde_json::to_vec_pretty(&plan)?;
    out.push(b'\n');
    std::io::stdout().write_all(&out)?;
    Ok(())
}

fn effective_configs(exec: &ExecArgs, seed: Option<u64>) -> anyhow::Result<(PlatformConfig, DataSourceConfig)> {
    let file = match &exec.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let mut platform = file.platform;
    let mut source = file.source;
    if let Some(s) = seed {
        platform.seed = s;
        source.seed = s;
    }
    if let Some(v) = exec.rate_limit {
        platform.invocation_rate_limit = v;
    }
    if let Some(v) = exec.cold_start_ms {
        platform.cold_start_ms = v;
    }
    if let Some(v) = exec.warm_start_ms {
        platform.warm_start_ms = v;
    }
    if let Some(v) = exec.timeout_ms {
        platform.timeout_ms = v;
    }
    if let Some(v) = exec.service_jitter {
        platform.service_jitter_frac = v;
    }
    if let Some(v) = exec.start_jitter_max_ms {
        platform.start_jitter_max_ms = v;
    }
    if let Some(v) = exec.sampling_ms {
        platform.sampling_ms = v;
    }
    platform.validate().map_err(|e| anyhow::anyhow!("invalid platform config: {e}"))?;
    Ok((platform, source))
}

fn make_backend(
    exec: &ExecArgs,
    platform: &PlatformConfig,
    source: &DataSourceConfig,
    preset: &WorkloadPreset,
    npartitions: u32,
    out_dir: &Path,
) -> anyhow::Result<Box<dyn Backend>> {
    match exec.backend {
        BackendName::Sim => {
            let cost = CostModel { per_entry_cpu_us: preset.per_entry_cpu_us };
            let backend = SimBackend::new(platform.clone(), source.clone(), cost)
                .map_err(|e| anyhow::anyhow!("simulator init failed: {e}"))?;
            Ok(Box::new(backend))
        }
        BackendName::Local => {
            let exe = std::env::current_exe().context("locating worker executable")?;
            let default_workers = (npartitions as usize).min(8);
            let max_workers = exec
                .local_workers
                .unwrap_or(default_workers)
                .min(platform.concurrency_limit as usize)
                .max(1);
            let backend = LocalBackend::new(LocalBackendOptions {
                worker_cmd: vec![exe.to_string_lossy().into_owned(), "worker".into()],
                max_workers,
                store_root: out_dir.join("store"),
                scratch_root: out_dir.join("scratch"),
                source: source.clone(),
                sampling_ms: platform.sampling_ms,
                default_timeout_ms: platform.timeout_ms,
            })
            .context("starting local backend")?;
            Ok(Box::new(backend))
        }
    }
}

#[derive(Serialize)]
struct RunSummary {
    run_id: String,
    workload: String,
    backend: String,
    npartitions_requested: u32,
    npartitions_effective: u32,
    wall_runtime_ms: f64,
    total_invocations: u64,
    per_partition: BTreeMap<u32, PartitionOutcome>,
    results: BTreeMap<u32, FinalValue>,
}

fn summarize(result: &RunResult, workload: &str, backend: &str) -> RunSummary {
    RunSummary {
        run_id: result.run_id.clone(),
        workload: workload.to_string(),
        backend: backend.to_string(),
        npartitions_requested: result.npartitions_requested,
        npartitions_effective: result.npartitions_effective,
        wall_runtime_ms: us_to_ms(result.wall_runtime_us),
        total_invocations: result.total_invocations,
        per_partition: result.per_partition.clone(),
        results: result.reduced.finalize(),
    }
}

fn backend_name(exec: &ExecArgs) -> &'static str {
    match exec.backend {
        BackendName::Sim => "sim",
        BackendName::Local => "local",
    }
}

fn execute_run(
    preset: &WorkloadPreset,
    npartitions: u32,
    exec: &ExecArgs,
    run_id: String,
) -> anyhow::Result<RunResult> {
    let (platform, source) = effective_configs(exec, preset_seed(preset))?;
    std::fs::create_dir_all(&exec.out)?;
    let mut backend = make_backend(exec, &platform, &source, preset, npartitions, &exec.out)?;
    let config = RunConfig {
        run_id,
        npartitions,
        max_retries: exec.max_retries,
        invoke_timeout_ms: platform.timeout_ms,
        warmup_count: exec.warmup,
        manifest_path: None,
    };
    let token = exec.token.as_ref().map(|t| t.as_bytes().to_vec());
    let result = client::run(
        backend.as_mut(),
        &preset.graph,
        &preset.dataset,
        &config,
        token.as_deref(),
        &preset.headers,
    )?;
    Ok(result)
}

fn preset_seed(preset: &WorkloadPreset) -> Option<u64> {
    Some(preset.dataset.seed)
}

fn cmd_run(args: &RunArgs) -> anyhow::Result<()> {
    let preset = args.workload.build();
    let run_id = args.exec.run_id.clone().unwrap_or_else(|| {
        format!(
            "{}-p{}-{}-s{}",
            preset.name,
            args.npartitions,
            backend_name(&args.exec),
            preset.dataset.seed
        )
    });
    let result = execute_run(&preset, args.npartitions, &args.exec, run_id)?;

    let summary = summarize(&result, &preset.name, backend_name(&args.exec));
    write_json(&args.exec.out.join("summary.json"), &summary)?;
    std::fs::write(args.exec.out.join("traces.csv"), report::traces_csv_bytes(&result.traces))?;
    eprintln!(
        "run {}: {} partitions, {} invocations, wall runtime {:.1} ms",
        summary.run_id,
        summary.npartitions_effective,
        summary.total_invocations,
        summary.wall_runtime_ms
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    if args.partitions.is_empty() {
        bail!("sweep needs at least one partition count");
    }
    let preset = args.workload.build();
    let mut measurements = Vec::new();
    let mut summaries = Vec::new();
    let mut last_traces = Vec::new();
    for &p in &args.partitions {
        let run_id = format!(
            "{}-p{}-{}-s{}",
            preset.name,
            p,
            backend_name(&args.exec),
            preset.dataset.seed
        );
        let result = execute_run(&preset, p, &args.exec, run_id)?;
        measurements.push(RunMeasurement {
            workload: preset.name.clone(),
            npartitions: p,
            runtime_us: result.wall_runtime_us,
        });
        summaries.push(summarize(&result, &preset.name, backend_name(&args.exec)));
        last_traces = result.traces;
        eprintln!(
            "sweep {}: P={p} runtime {:.1} ms",
            preset.name,
            us_to_ms(measurements.last().unwrap().runtime_us)
        );
    }
    let table = crate::monitor::speedup_table(&measurements)?;
    std::fs::create_dir_all(&args.exec.out)?;
    std::fs::write(args.exec.out.join("speedup.csv"), report::speedup_csv_bytes(&table))?;
    write_json(&args.exec.out.join("summary.json"), &summaries)?;
    std::fs::write(args.exec.out.join("traces.csv"), report::traces_csv_bytes(&last_traces))?;
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    let bytes = std::fs::read(&args.traces)
        .with_context(|| format!("reading traces {}", args.traces.display()))?;
    let traces = report::read_traces_csv(&bytes)?;
    if traces.is_empty() {
        bail!("no samples in {}", args.traces.display());
    }
    report::write_report(&traces, &args.out, args.bucket_ms)?;
    eprintln!("report over {} traces written to {}", traces.len(), args.out.display());
    Ok(())
}

fn cmd_worker(args: &WorkerArgs) -> anyhow::Result<()> {
    crate::platform::local::run_worker_process(WorkerProcessOptions {
        connect: args.connect.clone(),
        store_root: args.store_root.clone(),
        source_config: args.source_config.clone(),
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}
