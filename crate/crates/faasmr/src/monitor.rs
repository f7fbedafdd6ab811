//! Per-invocation lifecycle traces and run-level aggregation.
//!
//! Every attempt produces an [`ExecutionTrace`]: global start/end stamps,
//! cold/killed flags, fetch/process phase intervals, and per-tick resource
//! samples. Simulated backends synthesize the samples from the virtual event
//! timeline; the local backend measures real process stats. Both share this
//! schema, so one report pipeline serves both.
//!
//! All timestamps are microseconds on the run's clock (virtual time from 0,
//! or wall time since the epoch). A sample describes the window from its own
//! timestamp to the next sample (or to the end of the trace).

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const US_PER_MS: u64 = 1_000;
pub const US_PER_SEC: u64 = 1_000_000;

pub fn us_to_ms(us: u64) -> f64 {
    us as f64 / 1_000.0
}

/// One resource sample; `t_us` is the offset from execution start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_us: u64,
    /// Fraction of one vCPU in use over this sample's window.
    pub cpu_frac: f64,
    pub mem_bytes: u64,
    /// Cumulative bytes received from the data source up to `t_us`.
    pub net_rx_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseKind {
    Fetch,
    Process,
}

/// A fetch or process interval in absolute time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseInterval {
    pub kind: PhaseKind,
    pub begin_us: u64,
    pub end_us: u64,
    /// Bytes transferred during a fetch phase; 0 for process phases.
    pub bytes: u64,
}

/// Lifecycle and resource record of one invocation attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub partition_id: u32,
    pub attempt: u32,
    pub start_us: u64,
    pub end_us: u64,
    /// Whether this attempt paid a cold container start.
    pub cold: bool,
    /// Whether the platform killed the attempt at its timeout.
    pub killed: bool,
    pub samples: Vec<Sample>,
    pub phases: Vec<PhaseInterval>,
}

#[derive(Debug, Error, PartialEq)]
#[error("trace invariant violated (partition {partition}, attempt {attempt}): {message}")]
pub struct TraceError {
    pub partition: u32,
    pub attempt: u32,
    pub message: String,
}

impl ExecutionTrace {
    fn err(&self, message: impl Into<String>) -> TraceError {
        TraceError { partition: self.partition_id, attempt: self.attempt, message: message.into() }
    }

    /// Check the structural invariants: ordered samples, non-decreasing
    /// cumulative network counter, phases non-overlapping and within bounds.
    pub fn validate(&self) -> Result<(), TraceError> {
        if self.start_us > self.end_us {
            return Err(self.err("start after end"));
        }
        let mut prev_t: Option<u64> = None;
        let mut prev_net = 0u64;
        for s in &self.samples {
            if let Some(p) = prev_t {
                if s.t_us <= p {
                    return Err(self.err(format!("samples not strictly increasing at t={}", s.t_us)));
                }
            }
            if s.net_rx_bytes < prev_net {
                return Err(self.err("net_rx_bytes decreased"));
            }
            prev_t = Some(s.t_us);
            prev_net = s.net_rx_bytes;
        }
        let mut cursor = self.start_us;
        for p in &self.phases {
            if p.begin_us < cursor || p.end_us < p.begin_us || p.end_us > self.end_us {
                return Err(self.err("phase outside trace bounds or overlapping"));
            }
            cursor = p.end_us;
        }
        Ok(())
    }

    pub fn duration_us(&self) -> u64 {
        self.end_us - self.start_us
    }

    /// CPU-seconds consumed, integrating each sample over its window.
    pub fn busy_us(&self) -> f64 {
        let mut busy = 0.0;
        for (i, s) in self.samples.iter().enumerate() {
            let next = self
                .samples
                .get(i + 1)
                .map_or(self.duration_us(), |n| n.t_us);
            busy += s.cpu_frac * (next - s.t_us) as f64;
        }
        busy
    }

    /// Total bytes fetched, from the final cumulative sample.
    pub fn net_total_bytes(&self) -> u64 {
        self.samples.last().map_or(0, |s| s.net_rx_bytes)
    }
}

/// Synthesize per-tick samples from a phase timeline. Sample boundaries fall
/// on the sampling grid *and* on phase boundaries, so every sample window
/// lies wholly inside one phase: utilization integrates exactly and no
/// sample ever mixes fetch and process activity.
pub fn synthesize_samples(
    start_us: u64,
    end_us: u64,
    phases: &[PhaseInterval],
    sampling_us: u64,
) -> Vec<Sample> {
    assert!(sampling_us > 0);
    if end_us <= start_us {
        return Vec::new();
    }
    let mut cuts: Vec<u64> = Vec::new();
    let mut t = start_us;
    while t < end_us {
        cuts.push(t);
        t = t.saturating_add(sampling_us);
    }
    for p in phases {
        if p.begin_us > start_us && p.begin_us < end_us {
            cuts.push(p.begin_us);
        }
        if p.end_us > start_us && p.end_us < end_us {
            cuts.push(p.end_us);
        }
    }
    cuts.sort_unstable();
    cuts.dedup();

    // Cumulative fetched bytes before each phase.
    let mut fetched_before: Vec<u64> = Vec::with_capacity(phases.len());
    let mut acc = 0u64;
    for p in phases {
        fetched_before.push(acc);
        if p.kind == PhaseKind::Fetch {
            acc += p.bytes;
        }
    }
    let total_after = acc;

    let net_at = |t: u64| -> u64 {
        for (i, p) in phases.iter().enumerate() {
            if t < p.begin_us {
                return fetched_before[i];
            }
            if t < p.end_us {
                return match p.kind {
                    PhaseKind::Process => fetched_before[i],
                    PhaseKind::Fetch => {
                        let span = (p.end_us - p.begin_us).max(1);
                        let frac = (t - p.begin_us) as f64 / span as f64;
                        fetched_before[i] + (p.bytes as f64 * frac) as u64
                    }
                };
            }
        }
        total_after
    };

    const MEM_BYTES: u64 = 256 * 1024 * 1024;
    cuts.iter()
        .map(|&t| {
            let in_process = phases
                .iter()
                .any(|p| p.kind == PhaseKind::Process && t >= p.begin_us && t < p.end_us);
            Sample {
                t_us: t - start_us,
                cpu_frac: if in_process { 1.0 } else { 0.0 },
                mem_bytes: MEM_BYTES,
                net_rx_bytes: net_at(t),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Run-level aggregation
// ---------------------------------------------------------------------------

/// Summed CPU usage over time across a set of traces.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCpu {
    /// Global time of bucket 0 (the earliest trace start).
    pub t0_us: u64,
    pub bucket_us: u64,
    /// Per-bucket sum of cpu_frac over all live executions.
    pub totals: Vec<f64>,
    pub n_traces: usize,
}

impl AggregateCpu {
    /// Utilization as a fraction of `n_traces` vCPUs, per bucket.
    pub fn fraction_of_total(&self) -> Vec<f64> {
        self.totals.iter().map(|t| t / self.n_traces as f64).collect()
    }
}

/// Sum cpu usage across traces into fixed-width buckets aligned to the
/// earliest start. Each sample's window contributes pro-rata to every bucket
/// it overlaps, so the series integrates to the total busy time exactly.
pub fn aggregate_cpu(traces: &[ExecutionTrace], bucket_us: u64) -> AggregateCpu {
    assert!(bucket_us > 0);
    if traces.is_empty() {
        return AggregateCpu { t0_us: 0, bucket_us, totals: Vec::new(), n_traces: 0 };
    }
    let t0 = traces.iter().map(|t| t.start_us).min().unwrap();
    let tmax = traces.iter().map(|t| t.end_us).max().unwrap();
    let nbuckets = (((tmax - t0) + bucket_us - 1) / bucket_us).max(1) as usize;
    let mut totals = vec![0.0f64; nbuckets];

    for tr in traces {
        for (i, s) in tr.samples.iter().enumerate() {
            let w_begin = tr.start_us + s.t_us;
            let w_end = tr
                .samples
                .get(i + 1)
                .map_or(tr.end_us, |n| tr.start_us + n.t_us);
            if s.cpu_frac == 0.0 || w_end <= w_begin {
                continue;
            }
            let mut b = ((w_begin - t0) / bucket_us) as usize;
            loop {
                let b_begin = t0 + b as u64 * bucket_us;
                let b_end = b_begin + bucket_us;
                let overlap = w_end.min(b_end).saturating_sub(w_begin.max(b_begin));
                if overlap > 0 {
                    totals[b] += s.cpu_frac * overlap as f64 / bucket_us as f64;
                }
                if w_end <= b_end {
                    break;
                }
                b += 1;
            }
        }
    }

    AggregateCpu { t0_us: t0, bucket_us, totals, n_traces: traces.len() }
}

/// Start/end spreads and the run wall runtime (max end minus min start).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SpreadStats {
    pub start_spread_us: u64,
    pub end_spread_us: u64,
    pub runtime_us: u64,
}

pub fn spread_stats(traces: &[ExecutionTrace]) -> Option<SpreadStats> {
    if traces.is_empty() {
        return None;
    }
    let min_start = traces.iter().map(|t| t.start_us).min().unwrap();
    let max_start = traces.iter().map(|t| t.start_us).max().unwrap();
    let min_end = traces.iter().map(|t| t.end_us).min().unwrap();
    let max_end = traces.iter().map(|t| t.end_us).max().unwrap();
    Some(SpreadStats {
        start_spread_us: max_start - min_start,
        end_spread_us: max_end - min_end,
        runtime_us: max_end - min_start,
    })
}

/// The window during which every trace is live: `[max start, min end)`.
pub fn steady_interval(traces: &[ExecutionTrace]) -> Option<(u64, u64)> {
    if traces.is_empty() {
        return None;
    }
    let max_start = traces.iter().map(|t| t.start_us).max().unwrap();
    let min_end = traces.iter().map(|t| t.end_us).min().unwrap();
    (max_start < min_end).then_some((max_start, min_end))
}

/// Minimum utilization (fraction of all vCPUs) over buckets fully contained
/// in the steady interval.
pub fn steady_utilization(traces: &[ExecutionTrace], bucket_us: u64) -> Option<f64> {
    let (lo, hi) = steady_interval(traces)?;
    let agg = aggregate_cpu(traces, bucket_us);
    let fracs = agg.fraction_of_total();
    let mut min: Option<f64> = None;
    for (b, f) in fracs.iter().enumerate() {
        let b_begin = agg.t0_us + b as u64 * bucket_us;
        let b_end = b_begin + bucket_us;
        if b_begin >= lo && b_end <= hi {
            min = Some(min.map_or(*f, |m: f64| m.min(*f)));
        }
    }
    min
}

// ---------------------------------------------------------------------------
// Speedup table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeasurement {
    pub workload: String,
    pub npartitions: u32,
    pub runtime_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeedupRow {
    pub npartitions: u32,
    pub runtime_us: u64,
    /// Runtime of the smallest measured partition count divided by this
    /// row's runtime.
    pub speedup: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("speedup table mixes workloads: {0:?} and {1:?}")]
pub struct MismatchedWorkload(pub String, pub String);

/// Build the scaling table; the reference is the smallest partition count.
pub fn speedup_table(runs: &[RunMeasurement]) -> Result<Vec<SpeedupRow>, MismatchedWorkload> {
    let mut rows: Vec<&RunMeasurement> = runs.iter().collect();
    if let Some(first) = rows.first() {
        if let Some(bad) = rows.iter().find(|r| r.workload != first.workload) {
            return Err(MismatchedWorkload(first.workload.clone(), bad.workload.clone()));
        }
    }
    rows.sort_by_key(|r| r.npartitions);
    let Some(reference) = rows.first() else { return Ok(Vec::new()) };
    let ref_runtime = reference.runtime_us as f64;
    Ok(rows
        .iter()
        .map(|r| SpeedupRow {
            npartitions: r.npartitions,
            runtime_us: r.runtime_us,
            speedup: ref_runtime / r.runtime_us as f64,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Phase-alternation checks
// ---------------------------------------------------------------------------

/// Verify the data-bound execution shape: fetch and process phases strictly
/// alternate, samples inside fetch phases stay under `fetch_cpu_ceiling`,
/// and the cumulative network counter is flat across process phases.
pub fn check_alternation(trace: &ExecutionTrace, fetch_cpu_ceiling: f64) -> Result<(), TraceError> {
    trace.validate()?;
    let err = |m: String| TraceError {
        partition: trace.partition_id,
        attempt: trace.attempt,
        message: m,
    };
    for pair in trace.phases.windows(2) {
        if pair[0].kind == pair[1].kind {
            return Err(err(format!("consecutive {:?} phases", pair[0].kind)));
        }
    }
    let phase_at = |t: u64| trace.phases.iter().find(|p| t >= p.begin_us && t < p.end_us);
    let mut prev_in_process: Option<(usize, u64)> = None;
    for s in &trace.samples {
        let abs = trace.start_us + s.t_us;
        match phase_at(abs) {
            Some(p) if p.kind == PhaseKind::Fetch => {
                if s.cpu_frac > fetch_cpu_ceiling {
                    return Err(err(format!(
                        "cpu {:.3} above ceiling {fetch_cpu_ceiling} inside a fetch phase",
                        s.cpu_frac
                    )));
                }
                prev_in_process = None;
            }
            Some(p) if p.kind == PhaseKind::Process => {
                let idx = trace
                    .phases
                    .iter()
                    .position(|q| std::ptr::eq(q, p))
                    .unwrap();
                if let Some((pidx, net)) = prev_in_process {
                    if pidx == idx && net != s.net_rx_bytes {
                        return Err(err("net_rx_bytes changed during a process phase".into()));
                    }
                }
                prev_in_process = Some((idx, s.net_rx_bytes));
            }
            _ => {
                prev_in_process = None;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_trace(partition: u32, start_us: u64, end_us: u64, cpu: f64) -> ExecutionTrace {
        let phases = vec![PhaseInterval {
            kind: PhaseKind::Process,
            begin_us: start_us,
            end_us,
            bytes: 0,
        }];
        let mut samples = synthesize_samples(start_us, end_us, &phases, 100_000);
        for s in &mut samples {
            s.cpu_frac *= cpu;
        }
        ExecutionTrace {
            partition_id: partition,
            attempt: 0,
            start_us,
            end_us,
            cold: true,
            killed: false,
            samples,
            phases,
        }
    }

    #[test]
    fn overlapping_full_cpu_traces_sum_to_two() {
        let traces = vec![flat_trace(0, 0, 1_000_000, 1.0), flat_trace(1, 0, 1_000_000, 1.0)];
        let agg = aggregate_cpu(&traces, 100_000);
        assert!(agg.totals.iter().all(|&t| (t - 2.0).abs() < 1e-9), "{:?}", agg.totals);
        assert_eq!(agg.fraction_of_total()[0], 1.0);
    }

    #[test]
    fn disjoint_traces_never_exceed_one() {
        let traces = vec![flat_trace(0, 0, 500_000, 1.0), flat_trace(1, 700_000, 1_200_000, 1.0)];
        let agg = aggregate_cpu(&traces, 100_000);
        assert!(agg.totals.iter().all(|&t| t <= 1.0 + 1e-9));
    }

    #[test]
    fn aggregation_conserves_busy_time() {
        let traces = vec![
            flat_trace(0, 130_000, 1_111_000, 0.8),
            flat_trace(1, 0, 950_000, 1.0),
            flat_trace(2, 400_000, 777_777, 0.5),
        ];
        let busy: f64 = traces.iter().map(ExecutionTrace::busy_us).sum();
        let bucket = 250_000u64;
        let agg = aggregate_cpu(&traces, bucket);
        let integrated: f64 = agg.totals.iter().map(|t| t * bucket as f64).sum();
        assert!(
            (integrated - busy).abs() <= bucket as f64,
            "integrated {integrated} vs busy {busy}"
        );
    }

    #[test]
    fn spread_stats_direct_arithmetic() {
        let traces = vec![
            flat_trace(0, 0, 10_000_000, 1.0),
            flat_trace(1, 1_000_000, 11_000_000, 1.0),
            flat_trace(2, 4_000_000, 20_000_000, 1.0),
        ];
        let s = spread_stats(&traces).unwrap();
        assert_eq!(s.start_spread_us, 4_000_000);
        assert_eq!(s.end_spread_us, 10_000_000);
        assert_eq!(s.runtime_us, 20_000_000);
    }

    #[test]
    fn single_trace_spreads_are_zero() {
        let traces = vec![flat_trace(0, 5, 105, 1.0)];
        let s = spread_stats(&traces).unwrap();
        assert_eq!((s.start_spread_us, s.end_spread_us), (0, 0));
        assert_eq!(s.runtime_us, 100);
    }

    #[test]
    fn speedup_reference_is_smallest_partition_count() {
        let runs = vec![
            RunMeasurement { workload: "w".into(), npartitions: 16, runtime_us: 40_000_000 },
            RunMeasurement { workload: "w".into(), npartitions: 8, runtime_us: 80_000_000 },
        ];
        let rows = speedup_table(&runs).unwrap();
        assert_eq!(rows[0].npartitions, 8);
        assert_eq!(rows[0].speedup, 1.0);
        assert_eq!(rows[1].speedup, 2.0);
    }

    #[test]
    fn speedup_rejects_mixed_workloads() {
        let runs = vec![
            RunMeasurement { workload: "a".into(), npartitions: 8, runtime_us: 1 },
            RunMeasurement { workload: "b".into(), npartitions: 16, runtime_us: 1 },
        ];
        assert!(speedup_table(&runs).is_err());
    }

    #[test]
    fn synthesized_samples_cut_at_phase_boundaries() {
        let phases = vec![
            PhaseInterval { kind: PhaseKind::Fetch, begin_us: 0, end_us: 150_000, bytes: 1000 },
            PhaseInterval { kind: PhaseKind::Process, begin_us: 150_000, end_us: 400_000, bytes: 0 },
            PhaseInterval { kind: PhaseKind::Fetch, begin_us: 400_000, end_us: 550_000, bytes: 1000 },
            PhaseInterval { kind: PhaseKind::Process, begin_us: 550_000, end_us: 800_000, bytes: 0 },
        ];
        let samples = synthesize_samples(0, 800_000, &phases, 100_000);
        let trace = ExecutionTrace {
            partition_id: 0,
            attempt: 0,
            start_us: 0,
            end_us: 800_000,
            cold: false,
            killed: false,
            samples,
            phases,
        };
        trace.validate().unwrap();
        check_alternation(&trace, 0.05).unwrap();
        // Busy time equals total process time exactly.
        assert!((trace.busy_us() - 500_000.0).abs() < 1e-9);
        assert_eq!(trace.net_total_bytes(), 2000);
    }

    #[test]
    fn alternation_rejects_back_to_back_fetches() {
        let phases = vec![
            PhaseInterval { kind: PhaseKind::Fetch, begin_us: 0, end_us: 10, bytes: 1 },
            PhaseInterval { kind: PhaseKind::Fetch, begin_us: 10, end_us: 20, bytes: 1 },
        ];
        let trace = ExecutionTrace {
            partition_id: 0,
            attempt: 0,
            start_us: 0,
            end_us: 20,
            cold: false,
            killed: false,
            samples: vec![],
            phases,
        };
        assert!(check_alternation(&trace, 0.05).is_err());
    }

    #[test]
    fn steady_utilization_of_fully_overlapping_traces_is_one() {
        let traces: Vec<_> = (0..4).map(|i| flat_trace(i, i as u64 * 50_000, 2_000_000, 1.0)).collect();
        let u = steady_utilization(&traces, 100_000).unwrap();
        assert!((u - 1.0).abs() < 1e-9, "{u}");
    }
}
