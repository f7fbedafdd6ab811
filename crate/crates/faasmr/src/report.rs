//! CSV products of the monitoring pipeline.
//!
//! The traces file carries one row per sample with the trace lifecycle
//! columns repeated (`partition,attempt,start_ms,end_ms,cold,killed,t_ms,
//! cpu_frac,mem_bytes,net_rx_bytes`). The derived products — aggregate CPU
//! series, start/end distributions, per-execution summaries, the single
//! execution view, and the scaling table — are plain CSV for any external
//! plotting tool. All writers are deterministic: equal inputs produce
//! byte-identical files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::monitor::{
    aggregate_cpu, spread_stats, us_to_ms, AggregateCpu, ExecutionTrace, Sample, SpeedupRow,
};

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    partition: u32,
    attempt: u32,
    start_ms: f64,
    end_ms: f64,
    cold: bool,
    killed: bool,
    t_ms: f64,
    cpu_frac: f64,
    mem_bytes: u64,
    net_rx_bytes: u64,
}

/// Serialize traces to the sample-per-row CSV. Traces without samples do not
/// contribute rows.
pub fn traces_csv_bytes(traces: &[ExecutionTrace]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in traces {
        for s in &t.samples {
            w.serialize(TraceRow {
                partition: t.partition_id,
                attempt: t.attempt,
                start_ms: us_to_ms(t.start_us),
                end_ms: us_to_ms(t.end_us),
                cold: t.cold,
                killed: t.killed,
                t_ms: us_to_ms(s.t_us),
                cpu_frac: s.cpu_frac,
                mem_bytes: s.mem_bytes,
                net_rx_bytes: s.net_rx_bytes,
            })
            .expect("csv row serializes");
        }
    }
    w.into_inner().expect("csv buffer")
}

fn ms_to_us(ms: f64) -> u64 {
    (ms * 1_000.0).round() as u64
}

/// Rebuild traces from the CSV form (phase intervals are not part of the
/// file and come back empty).
pub fn read_traces_csv(bytes: &[u8]) -> Result<Vec<ExecutionTrace>, csv::Error> {
    let mut grouped: BTreeMap<(u32, u32), ExecutionTrace> = BTreeMap::new();
    let mut r = csv::Reader::from_reader(bytes);
    for row in r.deserialize::<TraceRow>() {
        let row = row?;
        let key = (row.partition, row.attempt);
        let trace = grouped.entry(key).or_insert_with(|| ExecutionTrace {
            partition_id: row.partition,
            attempt: row.attempt,
            start_us: ms_to_us(row.start_ms),
            end_us: ms_to_us(row.end_ms),
            cold: row.cold,
            killed: row.killed,
            samples: Vec::new(),
            phases: Vec::new(),
        });
        trace.samples.push(Sample {
            t_us: ms_to_us(row.t_ms),
            cpu_frac: row.cpu_frac,
            mem_bytes: row.mem_bytes,
            net_rx_bytes: row.net_rx_bytes,
        });
    }
    Ok(grouped.into_values().collect())
}

/// `npartitions,runtime_ms,speedup` rows of the scaling table.
pub fn speedup_csv_bytes(rows: &[SpeedupRow]) -> Vec<u8> {
    #[derive(Serialize)]
    struct Row {
        npartitions: u32,
        runtime_ms: f64,
        speedup: f64,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(Row {
            npartitions: r.npartitions,
            runtime_ms: us_to_ms(r.runtime_us),
            speedup: r.speedup,
        })
        .expect("csv row serializes");
    }
    w.into_inner().expect("csv buffer")
}

/// `t_ms,total_cpu,frac_of_total` aggregate utilization series.
pub fn aggregate_csv_bytes(agg: &AggregateCpu) -> Vec<u8> {
    #[derive(Serialize)]
    struct Row {
        t_ms: f64,
        total_cpu: f64,
        frac_of_total: f64,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, total) in agg.totals.iter().enumerate() {
        w.serialize(Row {
            t_ms: us_to_ms(i as u64 * agg.bucket_us),
            total_cpu: *total,
            frac_of_total: total / (agg.n_traces as f64).max(1.0),
        })
        .expect("csv row serializes");
    }
    w.into_inner().expect("csv buffer")
}

/// Per-execution start/end offsets relative to the earliest start/end.
pub fn start_end_distribution_csv(traces: &[ExecutionTrace]) -> Vec<u8> {
    #[derive(Serialize)]
    struct Row {
        partition: u32,
        attempt: u32,
        rel_start_ms: f64,
        rel_end_ms: f64,
        duration_ms: f64,
    }
    let min_start = traces.iter().map(|t| t.start_us).min().unwrap_or(0);
    let min_end = traces.iter().map(|t| t.end_us).min().unwrap_or(0);
    let mut sorted: Vec<&ExecutionTrace> = traces.iter().collect();
    sorted.sort_by_key(|t| (t.start_us, t.partition_id, t.attempt));
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in sorted {
        w.serialize(Row {
            partition: t.partition_id,
            attempt: t.attempt,
            rel_start_ms: us_to_ms(t.start_us - min_start),
            rel_end_ms: us_to_ms(t.end_us - min_end),
            duration_ms: us_to_ms(t.duration_us()),
        })
        .expect("csv row serializes");
    }
    w.into_inner().expect("csv buffer")
}

/// Per-execution resource summary: average CPU and total network traffic.
pub fn execution_summary_csv(traces: &[ExecutionTrace]) -> Vec<u8> {
    #[derive(Serialize)]
    struct Row {
        partition: u32,
        attempt: u32,
        duration_ms: f64,
        avg_cpu_frac: f64,
        net_total_bytes: u64,
    }
    let mut sorted: Vec<&ExecutionTrace> = traces.iter().collect();
    sorted.sort_by_key(|t| (t.partition_id, t.attempt));
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in sorted {
        let dur = t.duration_us();
        w.serialize(Row {
            partition: t.partition_id,
            attempt: t.attempt,
            duration_ms: us_to_ms(dur),
            avg_cpu_frac: if dur > 0 { t.busy_us() / dur as f64 } else { 0.0 },
            net_total_bytes: t.net_total_bytes(),
        })
        .expect("csv row serializes");
    }
    w.into_inner().expect("csv buffer")
}

/// Sample series of one representative execution (`t_ms,cpu_frac,
/// net_rx_bytes,mem_bytes`): the trace with the most network traffic, or the
/// longest one when nothing fetched.
pub fn single_execution_csv(traces: &[ExecutionTrace]) -> Vec<u8> {
    #[derive(Serialize)]
    struct Row {
        t_ms: f64,
        cpu_frac: f64,
        net_rx_bytes: u64,
        mem_bytes: u64,
    }
    let chosen = traces
        .iter()
        .max_by_key(|t| (t.net_total_bytes(), t.duration_us(), t.partition_id));
    let mut w = csv::Writer::from_writer(Vec::new());
    if let Some(t) = chosen {
        for s in &t.samples {
            w.serialize(Row {
                t_ms: us_to_ms(s.t_us),
                cpu_frac: s.cpu_frac,
                net_rx_bytes: s.net_rx_bytes,
                mem_bytes: s.mem_bytes,
            })
            .expect("csv row serializes");
        }
    }
    w.into_inner().expect("csv buffer")
}

/// Write the full report for one traces file: aggregate CPU series, start/end
/// distribution, per-execution summary, single-execution view, and the
/// spread statistics.
pub fn write_report(traces: &[ExecutionTrace], out_dir: &Path, bucket_ms: u64) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let agg = aggregate_cpu(traces, bucket_ms.max(1) * 1_000);
    write_file(out_dir.join("aggregate_cpu.csv"), &aggregate_csv_bytes(&agg))?;
    write_file(
        out_dir.join("start_end_distribution.csv"),
        &start_end_distribution_csv(traces),
    )?;
    write_file(out_dir.join("execution_summary.csv"), &execution_summary_csv(traces))?;
    write_file(out_dir.join("single_execution.csv"), &single_execution_csv(traces))?;

    #[derive(Serialize)]
    struct Stats {
        traces: usize,
        start_spread_ms: f64,
        end_spread_ms: f64,
        runtime_ms: f64,
    }
    let spread = spread_stats(traces);
    let stats = Stats {
        traces: traces.len(),
        start_spread_ms: spread.map_or(0.0, |s| us_to_ms(s.start_spread_us)),
        end_spread_ms: spread.map_or(0.0, |s| us_to_ms(s.end_spread_us)),
        runtime_ms: spread.map_or(0.0, |s| us_to_ms(s.runtime_us)),
    };
    let mut json = serde_json::to_vec_pretty(&stats).expect("stats serialize");
    json.push(b'\n');
    write_file(out_dir.join("stats.json"), &json)
}

fn write_file(path: std::path::PathBuf, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::monitor::{synthesize_samples, PhaseInterval, PhaseKind};

    fn trace(partition: u32, start_us: u64, end_us: u64) -> ExecutionTrace {
        let phases = vec![PhaseInterval { kind: PhaseKind::Process, begin_us: start_us, end_us, bytes: 0 }];
        let samples = synthesize_samples(start_us, end_us, &phases, 100_000);
        ExecutionTrace {
            partition_id: partition,
            attempt: 0,
            start_us,
            end_us,
            cold: partition == 0,
            killed: false,
            samples,
            phases,
        }
    }

    #[test]
    fn traces_csv_round_trips_samples_and_lifecycle() {
        let traces = vec![trace(0, 0, 450_000), trace(1, 200_000, 900_000)];
        let bytes = traces_csv_bytes(&traces);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(
            "partition,attempt,start_ms,end_ms,cold,killed,t_ms,cpu_frac,mem_bytes,net_rx_bytes"
        ));
        let back = read_traces_csv(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        for (orig, read) in traces.iter().zip(&back) {
            assert_eq!(read.partition_id, orig.partition_id);
            assert_eq!(read.start_us, orig.start_us);
            assert_eq!(read.end_us, orig.end_us);
            assert_eq!(read.cold, orig.cold);
            assert_eq!(read.samples.len(), orig.samples.len());
            for (a, b) in orig.samples.iter().zip(&read.samples) {
                assert_eq!(a.t_us, b.t_us);
                assert_eq!(a.cpu_frac, b.cpu_frac);
            }
        }
    }

    #[test]
    fn writers_are_deterministic() {
        let traces = vec![trace(3, 100_000, 700_000), trace(1, 0, 500_000)];
        assert_eq!(traces_csv_bytes(&traces), traces_csv_bytes(&traces));
        assert_eq!(execution_summary_csv(&traces), execution_summary_csv(&traces));
        assert_eq!(start_end_distribution_csv(&traces), start_end_distribution_csv(&traces));
    }

    #[test]
    fn report_writes_all_products() {
        let dir = tempfile::tempdir().unwrap();
        let traces = vec![trace(0, 0, 1_000_000), trace(1, 100_000, 800_000)];
        write_report(&traces, dir.path(), 1_000).unwrap();
        for f in [
            "aggregate_cpu.csv",
            "start_end_distribution.csv",
            "execution_summary.csv",
            "single_execution.csv",
            "stats.json",
        ] {
            assert!(dir.path().join(f).exists(), "missing {f}");
        }
    }
}
