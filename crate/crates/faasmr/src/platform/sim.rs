//! Deterministic discrete-event backend.
//!
//! Virtual time is microseconds from 0. Each submitted invocation passes
//! through admission (token-bucket throttled), container acquisition (warm
//! reuse within the retention window, LIFO by release time, subject to the
//! concurrency limit), startup delay, and a service interval derived from
//! the workload cost model: per-entry CPU cost plus per-cluster fetch cost,
//! optionally jittered. Results are computed for real through the same
//! worker code the local backend runs; only their timing is synthesized.
//!
//! Identical (config, seed, payload set) inputs replay an identical event
//! history: the event queue breaks time ties by insertion sequence, all
//! randomness is hash-derived from the seed, and no iteration order depends
//! on addresses or hashing.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use crate::dataset::DatasetDescriptor;
use crate::monitor::{synthesize_samples, ExecutionTrace, PhaseInterval, PhaseKind};
use crate::payload::{Payload, PayloadKind, ResponseStatus, WorkerErrorKind, WorkerResponse};
use crate::platform::token_bucket::TokenBucket;
use crate::platform::{Backend, Completion, InvocationId, InvocationOutcome, PlatformConfig};
use crate::rng;
use crate::storage::{DataSourceConfig, MemoryStore, ObjectStore, SimulatedSource};
use crate::worker::{execute_job, prepare_job, resolve_dataset, store_result, WorkerEnv};

const SALT_SERVICE: u64 = 0x5E21;
const SALT_START: u64 = 0x57A2;
const SALT_FAIL: u64 = 0xFA11;
const SALT_FAIL_FRAC: u64 = 0xF2AC;

/// Workload cost model driving virtual service time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub per_entry_cpu_us: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { per_entry_cpu_us: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    BucketRefill,
    Finish { inv: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // BinaryHeap is a max-heap; invert for earliest-first.
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

/// Introspection record of one invocation's lifecycle, for tests and
/// reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct InvocationRecord {
    pub partition: u32,
    pub attempt: u32,
    pub warmup: bool,
    pub submitted_us: u64,
    pub admitted_us: u64,
    pub started_us: u64,
    pub ended_us: u64,
    pub cold: bool,
    pub outcome: RecordOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Success,
    Failure(WorkerErrorKind),
    Timeout,
}

struct InvState {
    id: u64,
    bytes: Vec<u8>,
    parsed: Option<Payload>,
    deadline_ms: Option<u64>,
    warmup: bool,
    submitted_us: u64,
    admitted_us: u64,
    started_us: u64,
    container: u64,
    cold: bool,
    outcome: Option<InvocationOutcome>,
}

#[derive(Debug, Clone, Copy)]
struct PlannedPhase {
    kind: PhaseKind,
    duration_us: u64,
    bytes: u64,
    file: u32,
    cluster: u32,
}

pub struct SimBackend {
    config: PlatformConfig,
    cost: CostModel,
    now: u64,
    seq: u64,
    events: BinaryHeap<Event>,
    bucket: TokenBucket,
    refill_scheduled: bool,
    admission_queue: VecDeque<usize>,
    slot_queue: VecDeque<usize>,
    /// Idle containers as (id, released_at); top of the stack is the most
    /// recently released.
    idle_warm: Vec<(u64, u64)>,
    next_container: u64,
    running: u32,
    invocations: Vec<InvState>,
    completed: VecDeque<Completion>,
    pending_warmups: usize,
    store: Arc<MemoryStore>,
    source: Arc<SimulatedSource>,
    env: WorkerEnv,
    records: Vec<InvocationRecord>,
    _scratch: tempfile::TempDir,
}

impl SimBackend {
    pub fn new(
        config: PlatformConfig,
        source_config: DataSourceConfig,
        cost: CostModel,
    ) -> Result<Self, String> {
        config.validate()?;
        let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = Arc::new(MemoryStore::new());
        let source = Arc::new(SimulatedSource::new(source_config));
        let env = WorkerEnv {
            token_path: scratch.path().join("token"),
            scratch_dir: scratch.path().join("scratch"),
            store: Arc::clone(&store) as Arc<dyn ObjectStore>,
            source: Arc::clone(&source),
            sampling_us: config.sampling_ms * 1_000,
            manifest_root: None,
        };
        let bucket = TokenBucket::new(config.invocation_rate_limit, config.burst);
        Ok(Self {
            config,
            cost,
            now: 0,
            seq: 0,
            events: BinaryHeap::new(),
            bucket,
            refill_scheduled: false,
            admission_queue: VecDeque::new(),
            slot_queue: VecDeque::new(),
            idle_warm: Vec::new(),
            next_container: 0,
            running: 0,
            invocations: Vec::new(),
            completed: VecDeque::new(),
            pending_warmups: 0,
            store,
            source,
            env,
            records: Vec::new(),
            _scratch: scratch,
        })
    }

    pub fn source(&self) -> Arc<SimulatedSource> {
        Arc::clone(&self.source)
    }

    pub fn now_us(&self) -> u64 {
        self.now
    }

    pub fn records(&self) -> &[InvocationRecord] {
        &self.records
    }

    /// Resolve manifest-reference payloads against this root.
    pub fn set_manifest_root(&mut self, root: std::path::PathBuf) {
        self.env.manifest_root = Some(root);
    }

    /// Process all events due up to `t`, then move the clock there. Lets
    /// tests idle the platform past the warm-retention window.
    pub fn advance_to(&mut self, t: u64) {
        while let Some(e) = self.events.peek() {
            if e.time > t {
                break;
            }
            let e = self.events.pop().unwrap();
            self.process_event(e);
        }
        self.now = self.now.max(t);
    }

    fn schedule(&mut self, time: u64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.events.push(Event { time, seq, kind });
    }

    fn jitter_u(&self, salt: u64, partition: u32, attempt: u32) -> f64 {
        rng::uniform(&[self.config.seed, salt, u64::from(partition), u64::from(attempt)])
    }

    fn process_event(&mut self, e: Event) {
        self.now = self.now.max(e.time);
        match e.kind {
            EventKind::BucketRefill => {
                self.refill_scheduled = false;
                self.drain_admission_queue();
            }
            EventKind::Finish { inv } => self.on_finish(inv),
        }
    }

    fn drain_admission_queue(&mut self) {
        while let Some(&inv) = self.admission_queue.front() {
            if self.bucket.try_acquire(self.now) {
                self.admission_queue.pop_front();
                self.admit(inv);
            } else {
                break;
            }
        }
        if !self.admission_queue.is_empty() && !self.refill_scheduled {
            let t = self.bucket.next_refill_time(self.now);
            self.schedule(t, EventKind::BucketRefill);
            self.refill_scheduled = true;
        }
    }

    fn admit(&mut self, inv: usize) {
        self.invocations[inv].admitted_us = self.now;
        if self.running >= self.config.concurrency_limit {
            self.slot_queue.push_back(inv);
        } else {
            self.acquire_container(inv);
        }
    }

    fn acquire_container(&mut self, inv: usize) {
        let t = self.now;
        let retention = self.config.warm_retention_ms * 1_000;
        self.idle_warm.retain(|&(_, released)| t.saturating_sub(released) < retention);

        let (container, cold) = match self.idle_warm.pop() {
            Some((cid, _)) => (cid, false),
            None => {
                let cid = self.next_container;
                self.next_container += 1;
                (cid, true)
            }
        };
        self.running += 1;

        let startup_ms = if cold { self.config.cold_start_ms } else { self.config.warm_start_ms };
        let (partition, attempt) = self.invocations[inv]
            .parsed
            .as_ref()
            .map(|p| (p.range.partition_id, p.attempt))
            .unwrap_or((u32::MAX, 0));
        let jitter_us = if self.config.start_jitter_max_ms > 0 {
            (self.jitter_u(SALT_START, partition, attempt)
                * self.config.start_jitter_max_ms as f64
                * 1_000.0)
                .round() as u64
        } else {
            0
        };
        let start = t + startup_ms * 1_000 + jitter_us;

        let state = &mut self.invocations[inv];
        state.container = container;
        state.cold = cold;
        state.started_us = start;
        self.execute(inv, start);
    }

    /// Decide the invocation's complete virtual lifetime and outcome. The
    /// finish event only releases the container and surfaces the result.
    fn execute(&mut self, inv: usize, start: u64) {
        let (outcome, end) = self.compute_outcome(inv, start);
        self.invocations[inv].outcome = Some(outcome);
        self.schedule(end, EventKind::Finish { inv });
    }

    fn compute_outcome(&mut self, inv: usize, start: u64) -> (InvocationOutcome, u64) {
        let parsed = self.invocations[inv].parsed.clone();
        let deadline_ms = self.invocations[inv].deadline_ms;
        let Some(payload) = parsed else {
            // Undecodable payload: the worker reports immediately.
            let end = start + 1;
            let resp = WorkerResponse {
                status: ResponseStatus::Failure,
                partition_id: None,
                attempt: 0,
                result_ref: None,
                error_kind: Some(WorkerErrorKind::DecodeError),
                error_message: Some("payload did not decode".into()),
                monitoring: Some(self.bare_trace(0, 0, start, end, inv)),
            };
            return (InvocationOutcome::Response(resp), end);
        };
        let partition = payload.range.partition_id;
        let attempt = payload.attempt;

        if payload.kind == PayloadKind::Warmup {
            let end = start;
            let resp = WorkerResponse {
                status: ResponseStatus::Success,
                partition_id: Some(partition),
                attempt,
                result_ref: None,
                error_kind: None,
                error_message: None,
                monitoring: Some(self.bare_trace(partition, attempt, start, end, inv)),
            };
            return (InvocationOutcome::Response(resp), end);
        }

        let dataset = match resolve_dataset(&payload, self.env.manifest_root.as_deref()) {
            Ok(d) => d,
            Err(f) => {
                let end = start + 1;
                let resp = self.failure_response(&payload, f.kind, f.message, start, end, inv, &[]);
                return (InvocationOutcome::Response(resp), end);
            }
        };

        let phases = self.plan_phases(&payload, &dataset);
        let service: u64 = phases.iter().map(|p| p.duration_us).sum();
        let timeout_us = deadline_ms
            .map_or(self.config.timeout_ms, |d| d.min(self.config.timeout_ms))
            * 1_000;

        // Deterministic failure injection happens before any result exists.
        if self.config.failure.applies_to(partition)
            && self.jitter_u(SALT_FAIL, partition, attempt) < self.config.failure.probability
        {
            let frac = self.jitter_u(SALT_FAIL_FRAC, partition, attempt);
            let fail_at = ((service as f64 * frac) as u64).min(timeout_us);
            let end = start + fail_at;
            let clipped = clip_phases(&phases, start, fail_at);
            self.record_clipped_fetches(&phases, fail_at);
            let resp = self.failure_response(
                &payload,
                WorkerErrorKind::InjectedFault,
                format!("injected {:?} fault", self.config.failure.kind),
                start,
                end,
                inv,
                &clipped,
            );
            return (InvocationOutcome::Response(resp), end);
        }

        if service > timeout_us {
            let end = start + timeout_us;
            let clipped = clip_phases(&phases, start, timeout_us);
            self.record_clipped_fetches(&phases, timeout_us);
            let samples =
                synthesize_samples(start, end, &clipped, self.config.sampling_ms * 1_000);
            let trace = ExecutionTrace {
                partition_id: partition,
                attempt,
                start_us: start,
                end_us: end,
                cold: self.invocations[inv].cold,
                killed: true,
                samples,
                phases: clipped,
            };
            return (InvocationOutcome::Timeout { trace }, end);
        }

        // Run the real worker path for the actual result; timing comes from
        // the phase plan above.
        let end = start + service;
        let bytes = self.invocations[inv].bytes.clone();
        match prepare_job(&bytes, &self.env) {
            Err(f) => {
                let fail_end = start + 1_000;
                let resp = self.failure_response(&payload, f.kind, f.message, start, fail_end, inv, &[]);
                (InvocationOutcome::Response(resp), fail_end)
            }
            Ok(job) => match execute_job(&job, &self.env, &mut crate::graph::NoSink, None) {
                Ok(result) => match store_result(&self.env, &job.payload, &result) {
                    Ok(key) => {
                        let abs = place_phases(&phases, start);
                        let samples =
                            synthesize_samples(start, end, &abs, self.config.sampling_ms * 1_000);
                        let trace = ExecutionTrace {
                            partition_id: partition,
                            attempt,
                            start_us: start,
                            end_us: end,
                            cold: self.invocations[inv].cold,
                            killed: false,
                            samples,
                            phases: abs,
                        };
                        let resp = WorkerResponse {
                            status: ResponseStatus::Success,
                            partition_id: Some(partition),
                            attempt,
                            result_ref: Some(key),
                            error_kind: None,
                            error_message: None,
                            monitoring: Some(trace),
                        };
                        (InvocationOutcome::Response(resp), end)
                    }
                    Err(f) => {
                        let resp =
                            self.failure_response(&payload, f.kind, f.message, start, end, inv, &[]);
                        (InvocationOutcome::Response(resp), end)
                    }
                },
                Err(f) => {
                    // Authorization fails on the first fetch; other errors
                    // are charged the full planned service.
                    let fail_end = if f.kind == WorkerErrorKind::TokenError { start + 1_000 } else { end };
                    let clipped = clip_phases(&phases, start, fail_end - start);
                    let resp =
                        self.failure_response(&payload, f.kind, f.message, start, fail_end, inv, &clipped);
                    (InvocationOutcome::Response(resp), fail_end)
                }
            },
        }
    }

    fn plan_phases(&self, payload: &Payload, dataset: &DatasetDescriptor) -> Vec<PlannedPhase> {
        let partition = payload.range.partition_id;
        let attempt = payload.attempt;
        let mult = if self.config.service_jitter_frac > 0.0 {
            1.0 + self.config.service_jitter_frac
                * (2.0 * self.jitter_u(SALT_SERVICE, partition, attempt) - 1.0)
        } else {
            1.0
        };
        let remote = dataset.kind == crate::dataset::DatasetKind::SimulatedRemote;
        let mut phases = Vec::new();
        for &(fi, ci) in &payload.range.cluster_ids {
            let Some(cluster) = dataset
                .files
                .get(fi as usize)
                .and_then(|f| f.clusters.get(ci as usize))
            else {
                continue;
            };
            if remote {
                let dur = crate::storage::fetch_duration_us(
                    self.source.config(),
                    cluster.byte_size,
                    fi,
                    ci,
                    attempt.wrapping_mul(1000),
                );
                phases.push(PlannedPhase {
                    kind: PhaseKind::Fetch,
                    duration_us: ((dur as f64 * mult).round() as u64).max(1),
                    bytes: cluster.byte_size,
                    file: fi,
                    cluster: ci,
                });
            }
            let entries = cluster.span();
            let proc = (entries as f64 * self.cost.per_entry_cpu_us * mult).round() as u64;
            phases.push(PlannedPhase {
                kind: PhaseKind::Process,
                duration_us: proc.max(1),
                bytes: 0,
                file: fi,
                cluster: ci,
            });
        }
        phases
    }

    /// Ledger accounting for attempts that fetched some clusters before
    /// being cut short (injected failure or timeout); completed fetch phases
    /// count as reads even though the results never materialize.
    fn record_clipped_fetches(&self, phases: &[PlannedPhase], limit_us: u64) {
        let mut cursor = 0u64;
        for p in phases {
            let end = cursor + p.duration_us;
            if p.kind == PhaseKind::Fetch && end <= limit_us {
                self.source.record_fetch(p.file, p.cluster);
            }
            cursor = end;
            if cursor >= limit_us {
                break;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn failure_response(
        &self,
        payload: &Payload,
        kind: WorkerErrorKind,
        message: String,
        start: u64,
        end: u64,
        inv: usize,
        phases: &[PhaseInterval],
    ) -> WorkerResponse {
        let samples = synthesize_samples(start, end, phases, self.config.sampling_ms * 1_000);
        let trace = ExecutionTrace {
            partition_id: payload.range.partition_id,
            attempt: payload.attempt,
            start_us: start,
            end_us: end,
            cold: self.invocations[inv].cold,
            killed: false,
            samples,
            phases: phases.to_vec(),
        };
        WorkerResponse {
            status: ResponseStatus::Failure,
            partition_id: Some(payload.range.partition_id),
            attempt: payload.attempt,
            result_ref: None,
            error_kind: Some(kind),
            error_message: Some(message),
            monitoring: Some(trace),
        }
    }

    fn bare_trace(&self, partition: u32, attempt: u32, start: u64, end: u64, inv: usize) -> ExecutionTrace {
        ExecutionTrace {
            partition_id: partition,
            attempt,
            start_us: start,
            end_us: end,
            cold: self.invocations[inv].cold,
            killed: false,
            samples: Vec::new(),
            phases: Vec::new(),
        }
    }

    fn on_finish(&mut self, inv: usize) {
        self.running -= 1;
        let container = self.invocations[inv].container;
        self.idle_warm.push((container, self.now));
        if let Some(next) = self.slot_queue.pop_front() {
            self.acquire_container(next);
        }

        let state = &self.invocations[inv];
        let outcome = state.outcome.clone().expect("finished invocation has outcome");
        let (partition, attempt) = state
            .parsed
            .as_ref()
            .map(|p| (p.range.partition_id, p.attempt))
            .unwrap_or((u32::MAX, 0));
        self.records.push(InvocationRecord {
            partition,
            attempt,
            warmup: state.warmup,
            submitted_us: state.submitted_us,
            admitted_us: state.admitted_us,
            started_us: state.started_us,
            ended_us: self.now,
            cold: state.cold,
            outcome: match &outcome {
                InvocationOutcome::Response(r) if r.is_success() => RecordOutcome::Success,
                InvocationOutcome::Response(r) => {
                    RecordOutcome::Failure(r.error_kind.unwrap_or(WorkerErrorKind::TransportError))
                }
                InvocationOutcome::Timeout { .. } => RecordOutcome::Timeout,
                InvocationOutcome::Transport { .. } => {
                    RecordOutcome::Failure(WorkerErrorKind::TransportError)
                }
            },
        });

        if state.warmup {
            self.pending_warmups -= 1;
        } else {
            let id = InvocationId(state.id);
            self.completed.push_back(Completion { id, outcome });
        }
    }
}

fn place_phases(phases: &[PlannedPhase], start: u64) -> Vec<PhaseInterval> {
    let mut out = Vec::with_capacity(phases.len());
    let mut cursor = start;
    for p in phases {
        let end = cursor + p.duration_us;
        out.push(PhaseInterval { kind: p.kind, begin_us: cursor, end_us: end, bytes: p.bytes });
        cursor = end;
    }
    out
}

/// Absolute phase intervals truncated at `limit_us` past `start`; a clipped
/// fetch reports bytes pro-rata so cumulative network counters stay
/// consistent.
fn clip_phases(phases: &[PlannedPhase], start: u64, limit_us: u64) -> Vec<PhaseInterval> {
    let mut out = Vec::new();
    let mut cursor = 0u64;
    for p in phases {
        if cursor >= limit_us {
            break;
        }
        let end = (cursor + p.duration_us).min(limit_us);
        let frac = (end - cursor) as f64 / p.duration_us.max(1) as f64;
        out.push(PhaseInterval {
            kind: p.kind,
            begin_us: start + cursor,
            end_us: start + end,
            bytes: (p.bytes as f64 * frac) as u64,
        });
        cursor += p.duration_us;
    }
    out
}

impl Backend for SimBackend {
    fn warm_pool(&mut self, k: u32) {
        for i in 0..k {
            let payload = Payload::warmup("warmup", i);
            let bytes = payload.encode();
            let id = self.seq;
            self.seq += 1;
            let inv = self.invocations.len();
            self.invocations.push(InvState {
                id,
                bytes,
                parsed: Some(payload),
                deadline_ms: None,
                warmup: true,
                submitted_us: self.now,
                admitted_us: 0,
                started_us: 0,
                container: 0,
                cold: false,
                outcome: None,
            });
            self.pending_warmups += 1;
            self.admission_queue.push_back(inv);
            self.drain_admission_queue();
        }
        while self.pending_warmups > 0 {
            let e = self.events.pop().expect("warmups pending but no events");
            self.process_event(e);
        }
    }

    fn submit(&mut self, payload: Vec<u8>, deadline_ms: Option<u64>) -> InvocationId {
        let parsed = Payload::decode(&payload).ok();
        let id = self.seq;
        self.seq += 1;
        let inv = self.invocations.len();
        let warmup = parsed.as_ref().is_some_and(|p| p.kind == PayloadKind::Warmup);
        self.invocations.push(InvState {
            id,
            bytes: payload,
            parsed,
            deadline_ms,
            warmup,
            submitted_us: self.now,
            admitted_us: 0,
            started_us: 0,
            container: 0,
            cold: false,
            outcome: None,
        });
        if warmup {
            self.pending_warmups += 1;
        }
        self.admission_queue.push_back(inv);
        self.drain_admission_queue();
        InvocationId(id)
    }

    fn next_completion(&mut self) -> Option<Completion> {
        loop {
            if let Some(c) = self.completed.pop_front() {
                return Some(c);
            }
            let e = self.events.pop()?;
            self.process_event(e);
        }
    }

    fn store(&self) -> Arc<dyn ObjectStore> {
        Arc::clone(&self.store) as Arc<dyn ObjectStore>
    }

    fn invoke_sync(&mut self, payload: Vec<u8>, deadline_ms: Option<u64>) -> InvocationOutcome {
        let id = self.submit(payload, deadline_ms);
        let mut stash: Vec<Completion> = Vec::new();
        let mut found = None;
        while let Some(c) = self.next_completion() {
            if c.id == id {
                found = Some(c.outcome);
                break;
            }
            stash.push(c);
        }
        for c in stash.into_iter().rev() {
            self.completed.push_front(c);
        }
        found.expect("submitted invocation completes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{uniform_dataset, DatasetKind};
    use crate::planner::build_plan;

    fn quick_config() -> PlatformConfig {
        PlatformConfig {
            invocation_rate_limit: 10.0,
            burst: 10,
            cold_start_ms: 5_000,
            warm_start_ms: 200,
            sampling_ms: 100,
            ..Default::default()
        }
    }

    fn payloads_for(d: &DatasetDescriptor, script: &str, nparts: u32) -> Vec<Vec<u8>> {
        let plan = build_plan(d, nparts).unwrap();
        plan.ranges
            .into_iter()
            .map(|r| Payload::for_range("simrun", 0, r, script, None, &[], d, None).encode())
            .collect()
    }

    fn small_dataset(nclusters: u64) -> DatasetDescriptor {
        uniform_dataset(
            "sim",
            DatasetKind::Synthetic,
            5,
            &["c0"],
            1,
            nclusters * 100,
            100,
            256,
            false,
        )
    }

    fn drain(backend: &mut SimBackend, n: usize) -> Vec<Completion> {
        let mut out = Vec::new();
        while out.len() < n {
            out.push(backend.next_completion().expect("completion"));
        }
        out
    }

    #[test]
    fn twenty_five_simultaneous_admissions_spread_two_seconds() {
        let d = small_dataset(25);
        let mut b = SimBackend::new(quick_config(), DataSourceConfig::default(), CostModel::default()).unwrap();
        for p in payloads_for(&d, "count 0;", 25) {
            b.submit(p, None);
        }
        drain(&mut b, 25);
        let admissions: Vec<u64> = b.records().iter().map(|r| r.admitted_us).collect();
        let spread = admissions.iter().max().unwrap() - admissions.iter().min().unwrap();
        assert_eq!(spread, 2_000_000);
        assert_eq!(admissions.iter().filter(|&&t| t == 0).count(), 10);
        assert_eq!(admissions.iter().filter(|&&t| t == 1_000_000).count(), 10);
        assert_eq!(admissions.iter().filter(|&&t| t == 2_000_000).count(), 5);
    }

    #[test]
    fn five_hundred_twelve_admissions_spread_fifty_one_seconds() {
        let d = small_dataset(512);
        let mut b = SimBackend::new(
            quick_config(),
            DataSourceConfig::default(),
            CostModel { per_entry_cpu_us: 10.0 },
        )
        .unwrap();
        for p in payloads_for(&d, "count 0;", 512) {
            b.submit(p, None);
        }
        drain(&mut b, 512);
        let admissions: Vec<u64> = b.records().iter().map(|r| r.admitted_us).collect();
        let spread = admissions.iter().max().unwrap() - admissions.iter().min().unwrap();
        assert_eq!(spread, 51_000_000);
    }

    #[test]
    fn cold_then_warm_for_back_to_back_invocations() {
        let d = small_dataset(2);
        let mut b = SimBackend::new(quick_config(), DataSourceConfig::default(), CostModel::default()).unwrap();
        let payloads = payloads_for(&d, "count 0;", 2);
        // Sequential: submit, wait, submit again; the second reuses the
        // released container.
        let o1 = b.invoke_sync(payloads[0].clone(), None);
        let o2 = b.invoke_sync(payloads[1].clone(), None);
        assert!(matches!(o1, InvocationOutcome::Response(ref r) if r.is_success()));
        assert!(matches!(o2, InvocationOutcome::Response(ref r) if r.is_success()));
        assert!(b.records()[0].cold);
        assert!(!b.records()[1].cold);
        let d0 = b.records()[0].started_us - b.records()[0].admitted_us;
        let d1 = b.records()[1].started_us - b.records()[1].admitted_us;
        assert_eq!(d0, 5_000_000);
        assert_eq!(d1, 200_000);
    }

    #[test]
    fn warm_pool_eliminates_cold_starts() {
        let d = small_dataset(64);
        let mut b = SimBackend::new(quick_config(), DataSourceConfig::default(), CostModel::default()).unwrap();
        b.warm_pool(64);
        assert!(b.records().iter().all(|r| r.warmup));
        for p in payloads_for(&d, "count 0;", 64) {
            b.submit(p, None);
        }
        drain(&mut b, 64);
        let work: Vec<_> = b.records().iter().filter(|r| !r.warmup).collect();
        assert_eq!(work.len(), 64);
        assert!(work.iter().all(|r| !r.cold), "warm pool should cover all invocations");
    }

    #[test]
    fn warm_pool_zero_is_noop() {
        let mut b = SimBackend::new(quick_config(), DataSourceConfig::default(), CostModel::default()).unwrap();
        b.warm_pool(0);
        assert_eq!(b.records().len(), 0);
        assert_eq!(b.now_us(), 0);
    }

    #[test]
    fn retention_expiry_forces_cold_start() {
        let d = small_dataset(1);
        let mut b = SimBackend::new(quick_config(), DataSourceConfig::default(), CostModel::default()).unwrap();
        b.warm_pool(1);
        let expiry = b.now_us() + 31 * 60 * 1_000_000;
        b.advance_to(expiry);
        let p = payloads_for(&d, "count 0;", 1).remove(0);
        let _ = b.invoke_sync(p, None);
        let work = b.records().iter().find(|r| !r.warmup).unwrap();
        assert!(work.cold, "container past retention must not be reused");
    }

    #[test]
    fn timeout_kills_long_invocations_distinctly() {
        let d = small_dataset(10);
        let mut config = quick_config();
        config.timeout_ms = 50; // 50 ms
        let mut b = SimBackend::new(
            config,
            DataSourceConfig::default(),
            CostModel { per_entry_cpu_us: 1_000.0 }, // 1 s service
        )
        .unwrap();
        let p = payloads_for(&d, "count 0;", 1).remove(0);
        let outcome = b.invoke_sync(p, None);
        match outcome {
            InvocationOutcome::Timeout { trace } => {
                assert!(trace.killed);
                assert_eq!(trace.duration_us(), 50_000);
            }
            other => panic!("expected timeout, got {other:?}"),
        }
        // Nothing stored for a killed attempt.
        assert!(b.store().keys().is_empty());
    }

    #[test]
    fn injected_failures_follow_probability_and_seed() {
        let d = small_dataset(8);
        let mut config = quick_config();
        config.failure = crate::platform::FailureSpec {
            probability: 1.0,
            kind: crate::platform::InjectedKind::Crash,
            partitions: vec![3],
        };
        let mk = || {
            SimBackend::new(config.clone(), DataSourceConfig::default(), CostModel::default()).unwrap()
        };
        let mut b1 = mk();
        for p in payloads_for(&d, "count 0;", 8) {
            b1.submit(p, None);
        }
        let c1 = drain(&mut b1, 8);
        let failed: Vec<u32> = c1
            .iter()
            .filter_map(|c| match &c.outcome {
                InvocationOutcome::Response(r) if !r.is_success() => r.partition_id,
                _ => None,
            })
            .collect();
        assert_eq!(failed, vec![3]);

        // Identical seed and payloads: identical event history.
        let mut b2 = mk();
        for p in payloads_for(&d, "count 0;", 8) {
            b2.submit(p, None);
        }
        let c2 = drain(&mut b2, 8);
        assert_eq!(c1, c2);
        assert_eq!(b1.records(), b2.records());
    }

    #[test]
    fn no_injection_at_probability_zero() {
        let d = small_dataset(4);
        let mut b = SimBackend::new(quick_config(), DataSourceConfig::default(), CostModel::default()).unwrap();
        for p in payloads_for(&d, "count 0;", 4) {
            b.submit(p, None);
        }
        let cs = drain(&mut b, 4);
        assert!(cs.iter().all(|c| matches!(&c.outcome, InvocationOutcome::Response(r) if r.is_success())));
    }

    #[test]
    fn timeout_never_exceeds_config() {
        let d = small_dataset(20);
        let mut config = quick_config();
        config.timeout_ms = 300;
        let mut b = SimBackend::new(
            config.clone(),
            DataSourceConfig::default(),
            CostModel { per_entry_cpu_us: 37.0 },
        )
        .unwrap();
        for p in payloads_for(&d, "count 0;", 20) {
            b.submit(p, None);
        }
        drain(&mut b, 20);
        for r in b.records() {
            assert!(r.ended_us - r.started_us <= config.timeout_ms * 1_000);
        }
    }

    #[test]
    fn warm_start_benefit_is_strict() {
        let d = small_dataset(16);
        let mk = |warm: u32| {
            let mut b =
                SimBackend::new(quick_config(), DataSourceConfig::default(), CostModel::default()).unwrap();
            b.warm_pool(warm);
            for p in payloads_for(&d, "count 0;", 16) {
                b.submit(p, None);
            }
            drain(&mut b, 16);
            let delays: Vec<u64> = b
                .records()
                .iter()
                .filter(|r| !r.warmup)
                .map(|r| r.started_us - r.admitted_us)
                .collect();
            delays.iter().sum::<u64>() as f64 / delays.len() as f64
        };
        let cold_mean = mk(0);
        let warm_mean = mk(16);
        assert!(warm_mean < cold_mean, "warm {warm_mean} vs cold {cold_mean}");
    }
}
