//! The serverless function body.
//!
//! One invocation: decode the payload, emplace the access token at the path
//! named by the environment, materialize shipped headers and register their
//! helper functions, execute the graph over the assigned range (fetching
//! remote clusters as needed), store the partial result in the object store
//! under `results/<run_id>/<partition>-<attempt>`, and return a response
//! carrying the result key plus the monitoring trace. Every error becomes a
//! structured failure response; nothing escapes the worker boundary except a
//! platform kill.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use crate::dataset::{DatasetDescriptor, SynthSource};
use crate::graph::{
    ClusterFetcher, CompiledGraph, ComputationGraph, ExecError, ExecOptions, FetchFailure,
    FetchInfo, PhaseSink,
};
use crate::monitor::{ExecutionTrace, PhaseInterval, PhaseKind, Sample};
use crate::payload::{DatasetRef, Payload, PayloadKind, ResponseStatus, WorkerErrorKind, WorkerResponse};
use crate::result::PartialResult;
use crate::storage::{result_key, ObjectStore, SimulatedSource, SourceError, StoreError};

pub const ENV_TOKEN_PATH: &str = "TOKEN_PATH";
pub const ENV_SCRATCH_DIR: &str = "SCRATCH_DIR";
pub const ENV_SAMPLING_MS: &str = "SAMPLING_MS";

/// Everything a worker needs from its environment.
pub struct WorkerEnv {
    /// Where the payload token is written for the data source to read
    /// (the value of `TOKEN_PATH`).
    pub token_path: PathBuf,
    /// Directory for header materialization (`SCRATCH_DIR`).
    pub scratch_dir: PathBuf,
    pub store: Arc<dyn ObjectStore>,
    pub source: Arc<SimulatedSource>,
    /// Resource sampling cadence (`SAMPLING_MS`), microseconds here.
    pub sampling_us: u64,
    /// Root for resolving manifest-reference dataset handles.
    pub manifest_root: Option<PathBuf>,
}

impl WorkerEnv {
    pub fn new(
        token_path: impl Into<PathBuf>,
        scratch_dir: impl Into<PathBuf>,
        store: Arc<dyn ObjectStore>,
        source: Arc<SimulatedSource>,
    ) -> Self {
        Self {
            token_path: token_path.into(),
            scratch_dir: scratch_dir.into(),
            store,
            source,
            sampling_us: 1_000_000,
            manifest_root: None,
        }
    }
}

/// A failure that becomes a structured response.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerFailure {
    pub kind: WorkerErrorKind,
    pub message: String,
}

impl WorkerFailure {
    fn new(kind: WorkerErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

/// A decoded, typechecked job ready to execute.
pub struct PreparedJob {
    pub payload: Payload,
    pub dataset: DatasetDescriptor,
    pub compiled: CompiledGraph,
}

/// Decode the payload and run the emplacement steps: write the token to the
/// environment-named path, materialize headers under the scratch directory,
/// register header helpers, resolve the dataset, parse and typecheck the
/// script.
pub fn prepare_job(bytes: &[u8], env: &WorkerEnv) -> Result<PreparedJob, WorkerFailure> {
    let payload = Payload::decode(bytes)
        .map_err(|e| WorkerFailure::new(WorkerErrorKind::DecodeError, e.to_string()))?;

    // The token slot reflects exactly what this payload shipped; a payload
    // without a token must not inherit one left by a previous invocation on
    // a reused container.
    match &payload.token {
        Some(token) => {
            if let Some(parent) = env.token_path.parent() {
                std::fs::create_dir_all(parent)
                    .map_err(|e| WorkerFailure::new(WorkerErrorKind::TokenError, e.to_string()))?;
            }
            std::fs::write(&env.token_path, token)
                .map_err(|e| WorkerFailure::new(WorkerErrorKind::TokenError, e.to_string()))?;
        }
        None => {
            let _ = std::fs::remove_file(&env.token_path);
        }
    }

    // Materialize headers and collect the helper functions they define.
    let mut header_helpers = Vec::new();
    for h in &payload.headers {
        let rel = Path::new(&h.path);
        if rel.is_absolute() || rel.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
            return Err(WorkerFailure::new(
                WorkerErrorKind::DecodeError,
                format!("header path {:?} escapes the scratch directory", h.path),
            ));
        }
        let target = env.scratch_dir.join(rel);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| WorkerFailure::new(WorkerErrorKind::StoreError, e.to_string()))?;
        }
        std::fs::write(&target, &h.content)
            .map_err(|e| WorkerFailure::new(WorkerErrorKind::StoreError, e.to_string()))?;

        let text = String::from_utf8(h.content.clone())
            .map_err(|_| WorkerFailure::new(WorkerErrorKind::ParseError, "header is not utf-8"))?;
        let parsed = ComputationGraph::parse(&text)
            .map_err(|e| WorkerFailure::new(WorkerErrorKind::ParseError, format!("header {}: {e}", h.path)))?;
        if !parsed.nodes.is_empty() {
            return Err(WorkerFailure::new(
                WorkerErrorKind::ParseError,
                format!("header {} may only define helper functions", h.path),
            ));
        }
        header_helpers.extend(parsed.helpers);
    }

    let dataset = resolve_dataset(&payload, env.manifest_root.as_deref())?;

    let mut graph = ComputationGraph::parse(&payload.script)
        .map_err(|e| WorkerFailure::new(WorkerErrorKind::ParseError, e.to_string()))?;
    // Header helpers are declared before the script's own.
    let mut helpers = header_helpers;
    helpers.append(&mut graph.helpers);
    graph.helpers = helpers;

    let compiled = graph
        .typecheck(&dataset)
        .map_err(|e| WorkerFailure::new(WorkerErrorKind::TypeError, e.to_string()))?;

    Ok(PreparedJob { payload, dataset, compiled })
}

/// Resolve the payload's dataset handle to a validated descriptor.
pub fn resolve_dataset(
    payload: &Payload,
    manifest_root: Option<&Path>,
) -> Result<DatasetDescriptor, WorkerFailure> {
    let dataset = match &payload.dataset {
        DatasetRef::Inline { descriptor } => descriptor.clone(),
        DatasetRef::Manifest { path } => {
            let p = Path::new(path);
            let resolved = if p.is_absolute() {
                p.to_path_buf()
            } else {
                manifest_root
                    .ok_or_else(|| {
                        WorkerFailure::new(
                            WorkerErrorKind::DecodeError,
                            "manifest-reference payload but no manifest root configured",
                        )
                    })?
                    .join(p)
            };
            DatasetDescriptor::load_manifest(&resolved)
                .map_err(|e| WorkerFailure::new(WorkerErrorKind::DecodeError, e.to_string()))?
        }
    };
    dataset
        .validate()
        .map_err(|e| WorkerFailure::new(WorkerErrorKind::DecodeError, e.to_string()))?;
    Ok(dataset)
}

/// Read back the emplaced token, if any.
pub fn read_token(env: &WorkerEnv) -> Option<String> {
    std::fs::read(&env.token_path)
        .ok()
        .map(|b| String::from_utf8_lossy(&b).into_owned())
}

/// Fetcher backed by the remote source: per-cluster retries on injected io
/// errors, authorization from the token file, read-ledger accounting, and a
/// shared counter feeding the network sampler.
pub struct SourceFetcher<'a> {
    source: &'a SimulatedSource,
    dataset: &'a DatasetDescriptor,
    token: Option<String>,
    worker_attempt: u32,
    net_counter: Option<&'a AtomicU64>,
}

impl<'a> SourceFetcher<'a> {
    pub fn new(
        source: &'a SimulatedSource,
        dataset: &'a DatasetDescriptor,
        token: Option<String>,
        worker_attempt: u32,
    ) -> Self {
        Self { source, dataset, token, worker_attempt, net_counter: None }
    }

    pub fn with_net_counter(mut self, counter: &'a AtomicU64) -> Self {
        self.net_counter = Some(counter);
        self
    }
}

impl ClusterFetcher for SourceFetcher<'_> {
    fn fetch(
        &mut self,
        file_idx: u32,
        cluster_idx: u32,
        cluster: &crate::dataset::ClusterInfo,
    ) -> Result<FetchInfo, FetchFailure> {
        let retries = self.source.config().fetch_retries;
        let mut try_idx = 0u32;
        loop {
            let attempt_code = self.worker_attempt.wrapping_mul(1000).wrapping_add(try_idx);
            match self.source.fetch_cluster(
                self.dataset,
                file_idx,
                cluster_idx,
                cluster,
                self.token.as_deref(),
                attempt_code,
            ) {
                Ok(stats) => {
                    if let Some(c) = self.net_counter {
                        c.fetch_add(stats.bytes, Ordering::Relaxed);
                    }
                    return Ok(FetchInfo { bytes: stats.bytes, duration_us: stats.duration_us });
                }
                Err(SourceError::Auth { file }) => return Err(FetchFailure::Auth { file }),
                Err(e @ SourceError::InjectedIo { .. }) => {
                    if try_idx >= retries {
                        return Err(FetchFailure::Io {
                            file: file_idx,
                            cluster: cluster_idx,
                            message: e.to_string(),
                        });
                    }
                    try_idx += 1;
                }
            }
        }
    }
}

/// Run the prepared job's fetch/process loop with the given phase sink.
pub fn execute_job(
    job: &PreparedJob,
    env: &WorkerEnv,
    sink: &mut dyn PhaseSink,
    net_counter: Option<&AtomicU64>,
) -> Result<PartialResult, WorkerFailure> {
    let token = read_token(env);
    let mut fetcher = SourceFetcher::new(&env.source, &job.dataset, token, job.payload.attempt);
    if let Some(c) = net_counter {
        fetcher = fetcher.with_net_counter(c);
    }
    let source = SynthSource::for_dataset(&job.dataset);
    crate::graph::execute_graph(
        &job.compiled,
        &job.dataset,
        &job.payload.range,
        &source,
        &mut fetcher,
        sink,
        ExecOptions::default(),
    )
    .map_err(|e| match e {
        ExecError::Fetch(FetchFailure::Auth { .. }) => WorkerFailure::new(WorkerErrorKind::TokenError, e.to_string()),
        ExecError::Fetch(_) => WorkerFailure::new(WorkerErrorKind::FetchError, e.to_string()),
        ExecError::Eval { .. } => WorkerFailure::new(WorkerErrorKind::TypeError, e.to_string()),
        ExecError::BadRange { .. } => WorkerFailure::new(WorkerErrorKind::DecodeError, e.to_string()),
    })
}

/// Store the encoded partial result under the attempt-suffixed key.
/// Re-delivery of an identical payload is idempotent: if the key exists with
/// byte-identical content the store is treated as already done.
pub fn store_result(
    env: &WorkerEnv,
    payload: &Payload,
    result: &PartialResult,
) -> Result<String, WorkerFailure> {
    let key = result_key(&payload.run_id, payload.range.partition_id, payload.attempt);
    let bytes = result.encode();
    match env.store.put(&key, &bytes) {
        Ok(()) => Ok(key),
        Err(StoreError::KeyExists(_)) => match env.store.get(&key) {
            Ok(existing) if existing == bytes => Ok(key),
            _ => Err(WorkerFailure::new(
                WorkerErrorKind::StoreError,
                format!("key {key} exists with different content"),
            )),
        },
        Err(e) => Err(WorkerFailure::new(WorkerErrorKind::StoreError, e.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Wall-clock execution (local backend and direct invocation)
// ---------------------------------------------------------------------------

/// Phase sink that stamps wall-clock boundaries.
struct WallPhaseSink {
    epoch_base_us: u64,
    t0: Instant,
    phases: Vec<PhaseInterval>,
    open: Option<(PhaseKind, u64)>,
}

impl WallPhaseSink {
    fn new(epoch_base_us: u64) -> Self {
        Self { epoch_base_us, t0: Instant::now(), phases: Vec::new(), open: None }
    }

    fn now_us(&self) -> u64 {
        self.epoch_base_us + self.t0.elapsed().as_micros() as u64
    }

    fn open_phase(&mut self, kind: PhaseKind) {
        self.open = Some((kind, self.now_us()));
    }

    fn close_phase(&mut self, bytes: u64) {
        if let Some((kind, begin)) = self.open.take() {
            let mut end = self.now_us();
            if end <= begin {
                end = begin + 1;
            }
            self.phases.push(PhaseInterval { kind, begin_us: begin, end_us: end, bytes });
        }
    }
}

impl PhaseSink for WallPhaseSink {
    fn fetch_started(&mut self) {
        self.open_phase(PhaseKind::Fetch);
    }

    fn fetch_finished(&mut self, info: &FetchInfo) {
        self.close_phase(info.bytes);
    }

    fn process_started(&mut self, _entries: u64) {
        self.open_phase(PhaseKind::Process);
    }

    fn process_finished(&mut self, _entries: u64) {
        self.close_phase(0);
    }
}

fn epoch_us() -> u64 {
    SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .unwrap_or_default()
        .as_micros() as u64
}

/// Background sampler reading `/proc/self` stats every tick.
struct Sampler {
    stop: Arc<AtomicBool>,
    handle: std::thread::JoinHandle<Vec<Sample>>,
}

// Linux USER_HZ; /proc cpu times are reported in these ticks.
const CLK_TCK: f64 = 100.0;

fn read_proc_cpu_ticks() -> Option<u64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // utime/stime are fields 14/15; the comm field may contain spaces, so
    // index from the closing paren.
    let rest = &stat[stat.rfind(')')? + 1..];
    let cols: Vec<&str> = rest.split_whitespace().collect();
    let utime: u64 = cols.get(11)?.parse().ok()?;
    let stime: u64 = cols.get(12)?.parse().ok()?;
    Some(utime + stime)
}

fn read_proc_rss_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let rss_pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(rss_pages * 4096)
}

impl Sampler {
    fn start(sampling_us: u64, net_counter: Arc<AtomicU64>) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let stop2 = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let t0 = Instant::now();
            let mut samples: Vec<Sample> = Vec::new();
            let mut last_ticks = read_proc_cpu_ticks().unwrap_or(0);
            let mut last_t = 0u64;
            loop {
                if stop2.load(Ordering::Relaxed) {
                    break;
                }
                std::thread::sleep(Duration::from_micros(sampling_us));
                let t = t0.elapsed().as_micros() as u64;
                let ticks = read_proc_cpu_ticks().unwrap_or(last_ticks);
                let dt = (t - last_t) as f64 / 1e6;
                let cpu = if dt > 0.0 {
                    ((ticks.saturating_sub(last_ticks)) as f64 / CLK_TCK / dt).min(1.0)
                } else {
                    0.0
                };
                if t > last_t {
                    samples.push(Sample {
                        t_us: t,
                        cpu_frac: cpu,
                        mem_bytes: read_proc_rss_bytes().unwrap_or(0),
                        net_rx_bytes: net_counter.load(Ordering::Relaxed),
                    });
                }
                last_ticks = ticks;
                last_t = t;
            }
            samples
        });
        Self { stop, handle }
    }

    fn stop(self) -> Vec<Sample> {
        self.stop.store(true, Ordering::Relaxed);
        self.handle.join().unwrap_or_default()
    }
}

/// Whether this process has served a request before; the first request after
/// a spawn is a cold start from the platform's point of view.
static SERVED_BEFORE: AtomicBool = AtomicBool::new(false);

/// Execute one payload end to end with wall-clock timing and real resource
/// sampling. This is the entrypoint of worker processes and of direct
/// invocation tests; simulated backends drive the same prepare/execute/store
/// steps on a virtual clock instead.
pub fn run_worker(bytes: &[u8], env: &WorkerEnv) -> WorkerResponse {
    let start_us = epoch_us();
    let cold = !SERVED_BEFORE.swap(true, Ordering::Relaxed);

    let fail = |kind: WorkerErrorKind,
                message: String,
                partition: Option<u32>,
                attempt: u32,
                trace: Option<ExecutionTrace>| {
        WorkerResponse {
            status: ResponseStatus::Failure,
            partition_id: partition,
            attempt,
            result_ref: None,
            error_kind: Some(kind),
            error_message: Some(message),
            monitoring: trace,
        }
    };
    let bare_trace = |end_us: u64| ExecutionTrace {
        partition_id: 0,
        attempt: 0,
        start_us,
        end_us,
        cold,
        killed: false,
        samples: Vec::new(),
        phases: Vec::new(),
    };

    let job = match prepare_job(bytes, env) {
        Ok(job) => job,
        Err(f) => {
            // Partition/attempt are known only if the envelope decoded.
            let (p, a) = Payload::decode(bytes)
                .map(|p| (Some(p.range.partition_id), p.attempt))
                .unwrap_or((None, 0));
            let mut t = bare_trace(epoch_us());
            t.partition_id = p.unwrap_or(0);
            t.attempt = a;
            return fail(f.kind, f.message, p, a, Some(t));
        }
    };
    let partition = job.payload.range.partition_id;
    let attempt = job.payload.attempt;

    if job.payload.kind == PayloadKind::Warmup {
        let mut t = bare_trace(epoch_us());
        t.partition_id = partition;
        t.attempt = attempt;
        return WorkerResponse {
            status: ResponseStatus::Success,
            partition_id: Some(partition),
            attempt,
            result_ref: None,
            error_kind: None,
            error_message: None,
            monitoring: Some(t),
        };
    }

    // Start the monitoring sidecar, run the fetch/process loop, store the
    // result, stop the sidecar, and return the monitoring data.
    let net_counter = Arc::new(AtomicU64::new(0));
    let sampler = Sampler::start(env.sampling_us, Arc::clone(&net_counter));
    let mut sink = WallPhaseSink::new(start_us);

    let exec = execute_job(&job, env, &mut sink, Some(&net_counter));
    let samples = sampler.stop();
    let end_us = epoch_us().max(start_us + 1);
    let trace = ExecutionTrace {
        partition_id: partition,
        attempt,
        start_us,
        end_us,
        cold,
        killed: false,
        samples,
        phases: sink.phases,
    };

    match exec {
        Ok(result) => match store_result(env, &job.payload, &result) {
            Ok(key) => WorkerResponse {
                status: ResponseStatus::Success,
                partition_id: Some(partition),
                attempt,
                result_ref: Some(key),
                error_kind: None,
                error_message: None,
                monitoring: Some(trace),
            },
            Err(f) => fail(f.kind, f.message, Some(partition), attempt, Some(trace)),
        },
        Err(f) => fail(f.kind, f.message, Some(partition), attempt, Some(trace)),
    }
}
