//! Preset workloads: a CPU-bound benchmark and a data-bound analysis.
//!
//! The CPU-bound preset generates a synthetic three-column dataset and
//! computes the mean of each column ten times over, so the graph is pure
//! compute with no remote reads. The data-bound preset models a physics-style
//! selection over token-gated remote files: a derived quantity, a
//! selectivity-tuned threshold cut, a second correlation-style cut, then a
//! count and a histogram; every cluster must be fetched before it is
//! processed, which produces the alternating network/CPU usage shape.

use crate::dataset::{uniform_dataset, DatasetDescriptor, DatasetKind};
use crate::graph::ComputationGraph;
use crate::payload::Header;

/// Mean of column 0 over entries `[0, 1e6)` at seed 42, computed once with
/// the reference generator and frozen.
pub const SYNTH_MEAN_SEED42_COL0_1M: f64 = 0.5004285116278034;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadPreset {
    pub name: String,
    pub dataset: DatasetDescriptor,
    pub graph: ComputationGraph,
    pub headers: Vec<Header>,
    /// Simulator cost model: virtual CPU time per processed entry.
    pub per_entry_cpu_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpuBoundParams {
    pub entries: u64,
    pub cluster_span: u64,
    pub seed: u64,
    pub per_entry_cpu_us: f64,
}

impl Default for CpuBoundParams {
    fn default() -> Self {
        // 2^20 entries in 512 uniform clusters: evenly divisible by every
        // partition count in the scaling sweep. The per-entry cost puts one
        // 8-way partition near (but under) the platform timeout, like the
        // full-size benchmark.
        Self { entries: 1 << 20, cluster_span: 2048, seed: 42, per_entry_cpu_us: 6_000.0 }
    }
}

/// Three synthetic columns; the mean of each column computed ten times.
pub fn cpu_bound(params: &CpuBoundParams) -> WorkloadPreset {
    let dataset = uniform_dataset(
        "cpu_bound",
        DatasetKind::Synthetic,
        params.seed,
        &["c0", "c1", "c2"],
        1,
        params.entries,
        params.cluster_span,
        // Synthetic data is never fetched; the size is bookkeeping only
        // (3 columns of 8-byte values per entry).
        24 * params.cluster_span.max(1),
        false,
    );
    let mut text = String::new();
    for i in 0..30 {
        text.push_str(&format!("mean {i} c{};\n", i % 3));
    }
    let graph = ComputationGraph::parse(&text).expect("preset graph parses");
    WorkloadPreset {
        name: "cpu_bound".into(),
        dataset,
        graph,
        headers: Vec::new(),
        per_entry_cpu_us: params.per_entry_cpu_us,
    }
}

/// Spec-shaped convenience: dataset of `scale` entries plus the 30-action
/// graph, with the default large-file cluster span.
pub fn build_cpu_bound(scale: u64) -> (DatasetDescriptor, ComputationGraph) {
    let params = CpuBoundParams { entries: scale, cluster_span: 100_000, ..Default::default() };
    let preset = cpu_bound(&params);
    (preset.dataset, preset.graph)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpsLikeParams {
    pub files: u32,
    pub clusters_per_file: u32,
    pub bytes_per_cluster: u64,
    pub entries_per_cluster: u64,
    /// Pass fraction of the first cut against the uniform distribution.
    pub selectivity: f64,
    pub seed: u64,
    pub per_entry_cpu_us: f64,
}

impl Default for PpsLikeParams {
    fn default() -> Self {
        Self {
            files: 64,
            clusters_per_file: 16,
            bytes_per_cluster: 1 << 20,
            entries_per_cluster: 1024,
            selectivity: 0.8,
            seed: 42,
            per_entry_cpu_us: 100.0,
        }
    }
}

/// Token-gated remote dataset with a two-cut selection, a count, and a
/// histogram. The first threshold passes `selectivity` of the uniform
/// column; the second cut `|c1 - c2| < t` is tuned so it alone would also
/// pass `selectivity` (`P(|u-v| < t) = 2t - t^2`), shipped as a helper
/// function through the payload headers.
pub fn pps_like(params: &PpsLikeParams) -> WorkloadPreset {
    assert!(params.selectivity > 0.0 && params.selectivity <= 1.0, "selectivity in (0, 1]");
    let dataset = uniform_dataset(
        "pps_like",
        DatasetKind::SimulatedRemote,
        params.seed,
        &["c0", "c1", "c2"],
        params.files as usize,
        u64::from(params.clusters_per_file) * params.entries_per_cluster,
        params.entries_per_cluster,
        params.bytes_per_cluster,
        true,
    );
    let t1 = params.selectivity;
    let t2 = 1.0 - (1.0 - params.selectivity).sqrt();
    let t2sq = t2 * t2;
    let text = format!(
        "define m = sqrt(c0*c0 + c1*c1);\n\
         filter c0 < {t1};\n\
         filter dsq(c1, c2) < {t2sq};\n\
         count 0;\n\
         histo1d 1 m 50 0 1.5;\n"
    );
    let graph = ComputationGraph::parse(&text).expect("preset graph parses");
    let headers = vec![Header {
        path: "selection_helpers.inc".into(),
        content: b"def dsq(a, b) = (a - b) * (a - b);\n".to_vec(),
    }];
    WorkloadPreset {
        name: "pps_like".into(),
        dataset,
        graph,
        headers,
        per_entry_cpu_us: params.per_entry_cpu_us,
    }
}

/// Spec-shaped convenience mirroring [`pps_like`].
pub fn build_pps_like(
    files: u32,
    clusters_per_file: u32,
    bytes_per_cluster: u64,
    selectivity: f64,
) -> (DatasetDescriptor, ComputationGraph) {
    let params = PpsLikeParams { files, clusters_per_file, bytes_per_cluster, selectivity, ..Default::default() };
    let preset = pps_like(&params);
    (preset.dataset, preset.graph)
}
