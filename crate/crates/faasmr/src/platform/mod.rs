//! Pluggable serverless execution backends.
//!
//! Two implementations share one submission interface: [`sim::SimBackend`]
//! advances a deterministic virtual clock and models admission throttling,
//! cold/warm container starts, concurrency limits, timeouts and failure
//! injection; [`local::LocalBackend`] runs real worker processes over
//! loopback sockets (no timing claims, real protocol).
//!
//! The client submits one invocation per controller and consumes completions
//! in whatever order they finish; backends never reorder a single
//! partition's retries because the client only resubmits after seeing the
//! previous attempt complete.

pub mod local;
pub mod sim;
pub mod token_bucket;
pub mod wire;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::monitor::ExecutionTrace;
use crate::payload::WorkerResponse;
use crate::storage::ObjectStore;

/// Kind of fault injected by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectedKind {
    /// The function crashes mid-run and reports a failure response.
    #[default]
    Crash,
}

/// Deterministic per-attempt failure injection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FailureSpec {
    /// Probability that any given attempt fails.
    pub probability: f64,
    pub kind: InjectedKind,
    /// Restrict injection to these partitions; empty means all.
    pub partitions: Vec<u32>,
}

impl FailureSpec {
    pub fn applies_to(&self, partition: u32) -> bool {
        self.probability > 0.0 && (self.partitions.is_empty() || self.partitions.contains(&partition))
    }
}

/// Shared backend tuning; modeled after public cloud function limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlatformConfig {
    /// New synchronous invocations admitted per second; `0` disables the
    /// throttle entirely.
    pub invocation_rate_limit: f64,
    /// Token bucket capacity for the admission throttle.
    pub burst: u32,
    /// Maximum concurrently running containers.
    pub concurrency_limit: u32,
    pub cold_start_ms: u64,
    pub warm_start_ms: u64,
    /// Idle containers stay reusable this long after release.
    pub warm_retention_ms: u64,
    /// Hard per-attempt kill limit.
    pub timeout_ms: u64,
    /// Uniform extra startup delay in `[0, max]`, seeded.
    pub start_jitter_max_ms: u64,
    /// Service time multiplied by `1 + frac * u`, `u` uniform in `[-1, 1]`.
    pub service_jitter_frac: f64,
    pub seed: u64,
    /// Monitor sampling cadence for synthesized traces.
    pub sampling_ms: u64,
    pub failure: FailureSpec,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            invocation_rate_limit: 10.0,
            burst: 10,
            concurrency_limit: 1000,
            cold_start_ms: 5_000,
            warm_start_ms: 200,
            warm_retention_ms: 30 * 60 * 1_000,
            timeout_ms: 900_000,
            start_jitter_max_ms: 0,
            service_jitter_frac: 0.0,
            seed: 0,
            sampling_ms: 100,
            failure: FailureSpec::default(),
        }
    }
}

impl PlatformConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.failure.probability) {
            return Err(format!("failure.probability {} outside [0,1]", self.failure.probability));
        }
        if self.service_jitter_frac < 0.0 || self.service_jitter_frac > 1.0 {
            return Err(format!("service_jitter_frac {} outside [0,1]", self.service_jitter_frac));
        }
        if self.invocation_rate_limit > 0.0 && self.burst == 0 {
            return Err("burst must be >= 1 when the throttle is enabled".into());
        }
        if self.concurrency_limit == 0 {
            return Err("concurrency_limit must be >= 1".into());
        }
        if self.sampling_ms == 0 {
            return Err("sampling_ms must be >= 1".into());
        }
        Ok(())
    }
}

/// Ticket identifying one submitted invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InvocationId(pub u64);

/// Terminal state of one invocation attempt, as seen by the client.
#[derive(Debug, Clone, PartialEq)]
pub enum InvocationOutcome {
    /// The worker returned a response (success or structured failure).
    Response(WorkerResponse),
    /// The platform killed the attempt at its deadline. The trace is
    /// synthesized with `end = start + timeout` and the kill flag set.
    Timeout { trace: ExecutionTrace },
    /// The transport to the worker broke (local backend only).
    Transport { message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub id: InvocationId,
    pub outcome: InvocationOutcome,
}

/// A serverless execution backend. `submit` never blocks on the invocation
/// itself; completions surface through `next_completion` in finish order.
pub trait Backend {
    /// Pre-warm up to `k` containers by running no-op invocations.
    fn warm_pool(&mut self, k: u32);

    /// Enqueue one synchronous invocation; `deadline_ms` caps this attempt's
    /// runtime in addition to the platform timeout.
    fn submit(&mut self, payload: Vec<u8>, deadline_ms: Option<u64>) -> InvocationId;

    /// Deliver the next finished invocation; `None` when nothing is in
    /// flight.
    fn next_completion(&mut self) -> Option<Completion>;

    /// The object store workers deposit results into.
    fn store(&self) -> Arc<dyn ObjectStore>;

    /// Convenience synchronous invocation: submit and wait for that ticket,
    /// leaving unrelated completions queued.
    fn invoke_sync(&mut self, payload: Vec<u8>, deadline_ms: Option<u64>) -> InvocationOutcome;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_limits() {
        let c = PlatformConfig::default();
        assert_eq!(c.invocation_rate_limit, 10.0);
        assert_eq!(c.burst, 10);
        assert_eq!(c.concurrency_limit, 1000);
        assert_eq!(c.cold_start_ms, 5_000);
        assert_eq!(c.warm_start_ms, 200);
        assert_eq!(c.warm_retention_ms, 1_800_000);
        assert_eq!(c.timeout_ms, 900_000);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = PlatformConfig { invocation_rate_limit: 0.0, seed: 9, ..Default::default() };
        let text = toml::to_string(&c).unwrap();
        let back: PlatformConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_config_files_use_defaults() {
        let c: PlatformConfig = toml::from_str("burst = 4\n[failure]\nprobability = 0.5\n").unwrap();
        assert_eq!(c.burst, 4);
        assert_eq!(c.failure.probability, 0.5);
        assert_eq!(c.cold_start_ms, 5_000);
    }

    #[test]
    fn validation_rejects_bad_probability() {
        let c = PlatformConfig {
            failure: FailureSpec { probability: 1.5, ..Default::default() },
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
