//! The client driver.
//!
//! Plans the dataset into ranges, optionally warms containers, launches one
//! synchronous invocation per range, retries failed attempts (same
//! controller, fresh attempt number, up to `max_retries`), reduces accepted
//! partial results eagerly into a single accumulator as responses arrive,
//! and collects one monitoring trace per attempt. A partition that still
//! fails after the last retry fails the whole run.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::DatasetDescriptor;
use crate::graph::{ComputationGraph, TypeError};
use crate::monitor::{spread_stats, ExecutionTrace};
use crate::payload::{Header, Payload, WorkerErrorKind};
use crate::planner::{build_plan, Plan, PlanError};
use crate::platform::{Backend, InvocationId, InvocationOutcome};
use crate::result::{PartialResult, ShapeMismatch};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub npartitions: u32,
    /// Retries per partition after the first attempt.
    pub max_retries: u32,
    /// Per-attempt deadline handed to the backend.
    pub invoke_timeout_ms: u64,
    /// Containers to warm with no-op invocations before the run.
    pub warmup_count: u32,
    /// Spill target for datasets too large to inline in every payload.
    pub manifest_path: Option<String>,
}

impl RunConfig {
    pub fn new(run_id: impl Into<String>, npartitions: u32) -> Self {
        Self {
            run_id: run_id.into(),
            npartitions,
            max_retries: 3,
            invoke_timeout_ms: 900_000,
            warmup_count: 0,
            manifest_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionStatus {
    Succeeded,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PartitionOutcome {
    pub attempts: u32,
    pub status: PartitionStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run_id: String,
    pub npartitions_requested: u32,
    pub npartitions_effective: u32,
    /// Merged accumulators across all accepted partitions.
    pub reduced: PartialResult,
    pub per_partition: BTreeMap<u32, PartitionOutcome>,
    /// One trace per attempt that produced monitoring data, sorted by
    /// (partition, attempt).
    pub traces: Vec<ExecutionTrace>,
    /// `max end - min start` over all attempts' traces.
    pub wall_runtime_us: u64,
    pub total_invocations: u64,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("graph does not typecheck against the dataset: {0}")]
    Type(#[from] TypeError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("dataset requires an access token but none was provided")]
    TokenRequired,
    #[error(
        "partition {partition} failed after {attempts} attempts: {kind}: {message}"
    )]
    PartitionFailed {
        partition: u32,
        attempts: u32,
        kind: WorkerErrorKind,
        message: String,
    },
    #[error("result for partition {partition} unreadable: {message}")]
    ResultUnreadable { partition: u32, message: String },
    #[error(transparent)]
    Shape(#[from] ShapeMismatch),
    #[error("backend delivered no completion while {0} partitions were in flight")]
    BackendStalled(usize),
}

/// Merge two partial results; commutative and associative.
pub fn reduce(acc: &mut PartialResult, other: &PartialResult) -> Result<(), ShapeMismatch> {
    acc.merge(other)
}

/// Extract one trace per attempt from completed invocation outcomes,
/// stamping the driver's partition/attempt bookkeeping onto each.
pub fn collect_monitoring(outcomes: &[(u32, u32, InvocationOutcome)]) -> Vec<ExecutionTrace> {
    let mut traces = Vec::new();
    for (partition, attempt, outcome) in outcomes {
        let trace = match outcome {
            InvocationOutcome::Response(resp) => resp.monitoring.clone(),
            InvocationOutcome::Timeout { trace } => Some(trace.clone()),
            InvocationOutcome::Transport { .. } => None,
        };
        if let Some(mut t) = trace {
            t.partition_id = *partition;
            t.attempt = *attempt;
            traces.push(t);
        }
    }
    traces
}

/// Build the per-partition payloads for one run. Everything except the range
/// is identical across partitions.
pub fn build_payloads(
    config: &RunConfig,
    plan: &Plan,
    script: &str,
    token: Option<&[u8]>,
    headers: &[Header],
    dataset: &DatasetDescriptor,
) -> Vec<Payload> {
    plan.ranges
        .iter()
        .map(|range| {
            Payload::for_range(
                &config.run_id,
                0,
                range.clone(),
                script,
                token,
                headers,
                dataset,
                config.manifest_path.as_deref(),
            )
        })
        .collect()
}

/// Execute a full distributed run on the given backend.
pub fn run(
    backend: &mut dyn Backend,
    graph: &ComputationGraph,
    dataset: &DatasetDescriptor,
    config: &RunConfig,
    token: Option<&[u8]>,
    headers: &[Header],
) -> Result<RunResult, RunError> {
    // Client-side preconditions: the script must typecheck here, not in 512
    // workers, and token-gated data needs the token before any invocation
    // (metadata access is gated the same way).
    graph.typecheck(dataset)?;
    if dataset.requires_token() && token.is_none() {
        return Err(RunError::TokenRequired);
    }
    let plan = build_plan(dataset, config.npartitions)?;

    if config.warmup_count > 0 {
        backend.warm_pool(config.warmup_count);
    }

    let payloads = build_payloads(config, &plan, &graph.source, token, headers, dataset);

    struct Controller {
        attempts: u32,
        done: bool,
    }
    let mut controllers: BTreeMap<u32, Controller> = BTreeMap::new();
    let mut tickets: BTreeMap<InvocationId, (u32, u32)> = BTreeMap::new();

    for payload in &payloads {
        let partition = payload.range.partition_id;
        let id = backend.submit(payload.encode(), Some(config.invoke_timeout_ms));
        tickets.insert(id, (partition, 0));
        controllers.insert(partition, Controller { attempts: 1, done: false });
    }
    let mut total_invocations = payloads.len() as u64;
    let npartitions_effective = plan.npartitions_effective;

    let mut reduced: Option<PartialResult> = None;
    let mut outcomes: Vec<(u32, u32, InvocationOutcome)> = Vec::new();
    let mut remaining = controllers.len();

    let store = backend.store();
    while remaining > 0 {
        let Some(completion) = backend.next_completion() else {
            return Err(RunError::BackendStalled(remaining));
        };
        let (partition, attempt) = *tickets
            .get(&completion.id)
            .expect("completion for unknown ticket");
        outcomes.push((partition, attempt, completion.outcome.clone()));

        let success = match &completion.outcome {
            InvocationOutcome::Response(resp) if resp.is_success() => {
                let key = resp.result_ref.as_deref().ok_or_else(|| RunError::ResultUnreadable {
                    partition,
                    message: "success response without result reference".into(),
                })?;
                let bytes = store.get(key).map_err(|e| RunError::ResultUnreadable {
                    partition,
                    message: e.to_string(),
                })?;
                let partial = PartialResult::decode(&bytes).map_err(|e| RunError::ResultUnreadable {
                    partition,
                    message: e.to_string(),
                })?;
                // Eager reduction into the single shared accumulator.
                match reduced.as_mut() {
                    Some(acc) => acc.merge(&partial)?,
                    None => reduced = Some(partial),
                }
                true
            }
            _ => false,
        };

        let controller = controllers.get_mut(&partition).expect("known partition");
        if success {
            controller.done = true;
            remaining -= 1;
            continue;
        }

        // Failed attempt: retry on the same controller or fail the run.
        let (kind, message) = match &completion.outcome {
            InvocationOutcome::Response(resp) => (
                resp.error_kind.unwrap_or(WorkerErrorKind::TransportError),
                resp.error_message.clone().unwrap_or_default(),
            ),
            InvocationOutcome::Timeout { .. } => {
                (WorkerErrorKind::Timeout, "attempt killed at its deadline".into())
            }
            InvocationOutcome::Transport { message } => {
                (WorkerErrorKind::TransportError, message.clone())
            }
        };
        if controller.attempts > config.max_retries {
            return Err(RunError::PartitionFailed {
                partition,
                attempts: controller.attempts,
                kind,
                message,
            });
        }
        let next_attempt = controller.attempts;
        controller.attempts += 1;
        total_invocations += 1;
        let base = payloads
            .iter()
            .find(|p| p.range.partition_id == partition)
            .expect("payload exists for partition");
        let mut retry = base.clone();
        retry.attempt = next_attempt;
        let id = backend.submit(retry.encode(), Some(config.invoke_timeout_ms));
        tickets.insert(id, (partition, next_attempt));
    }

    let mut traces = collect_monitoring(&outcomes);
    let wall_runtime_us = spread_stats(&traces).map_or(0, |s| s.runtime_us);
    traces.sort_by_key(|t| (t.partition_id, t.attempt));

    let per_partition = controllers
        .into_iter()
        .map(|(p, c)| {
            let status = if c.done { PartitionStatus::Succeeded } else { PartitionStatus::Failed };
            (p, PartitionOutcome { attempts: c.attempts, status })
        })
        .collect();

    Ok(RunResult {
        run_id: config.run_id.clone(),
        npartitions_requested: config.npartitions,
        npartitions_effective,
        reduced: reduced.expect("at least one partition reduced"),
        per_partition,
        traces,
        wall_runtime_us,
        total_invocations,
    })
}
