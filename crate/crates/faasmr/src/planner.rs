//! Split a dataset into cluster-aligned entry ranges.
//!
//! Partitions are balanced by cluster count, not by entry count or byte size:
//! the splitter has no insight into file contents, only into cluster
//! boundaries. Partition `i` of `P` receives the contiguous cluster block
//! `[floor(i*C/P), floor((i+1)*C/P))`, which keeps block sizes within one
//! cluster of each other and assigns every cluster to exactly one range.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetDescriptor, EntryRange, ValidationError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub npartitions_requested: u32,
    /// `min(npartitions_requested, total clusters)`: a range must contain at
    /// least one whole cluster.
    pub npartitions_effective: u32,
    pub ranges: Vec<EntryRange>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlanError {
    #[error("npartitions must be >= 1, got {0}")]
    InvalidPartitions(u32),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// Build the execution plan for `npartitions` requested partitions.
pub fn build_plan(d: &DatasetDescriptor, npartitions: u32) -> Result<Plan, PlanError> {
    if npartitions < 1 {
        return Err(PlanError::InvalidPartitions(npartitions));
    }
    d.validate()?;

    let clusters = d.global_clusters();
    let c = clusters.len() as u64;
    let p = u64::from(npartitions).min(c);

    let mut ranges = Vec::with_capacity(p as usize);
    for i in 0..p {
        let lo = (i * c / p) as usize;
        let hi = ((i + 1) * c / p) as usize;
        let block = &clusters[lo..hi];
        ranges.push(EntryRange {
            partition_id: i as u32,
            begin: block[0].first_entry,
            end: block[block.len() - 1].last_entry,
            cluster_ids: block.iter().map(|gc| (gc.file_idx, gc.cluster_idx)).collect(),
        });
    }

    Ok(Plan {
        npartitions_requested: npartitions,
        npartitions_effective: p as u32,
        ranges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{uniform_dataset, DatasetKind};
    use proptest::prelude::*;

    fn dataset_with_clusters(spans: &[u64]) -> DatasetDescriptor {
        use crate::dataset::{ClusterInfo, FileDescriptor};
        let mut clusters = Vec::new();
        let mut first = 0u64;
        for &s in spans {
            clusters.push(ClusterInfo { first_entry: first, last_entry: first + s, byte_size: 64 });
            first += s;
        }
        DatasetDescriptor {
            name: "p".into(),
            kind: DatasetKind::Synthetic,
            seed: 0,
            columns: vec!["c0".into()],
            files: vec![FileDescriptor { uri: "f0".into(), clusters, requires_token: false }],
        }
    }

    #[test]
    fn ten_clusters_into_four_partitions() {
        // Hand-applied floor-boundary formula: blocks [0,2),[2,5),[5,7),[7,10).
        let d = dataset_with_clusters(&[100; 10]);
        let plan = build_plan(&d, 4).unwrap();
        assert_eq!(plan.npartitions_effective, 4);
        let bounds: Vec<(u64, u64)> = plan.ranges.iter().map(|r| (r.begin, r.end)).collect();
        assert_eq!(bounds, vec![(0, 200), (200, 500), (500, 700), (700, 1000)]);
        let sizes: Vec<usize> = plan.ranges.iter().map(|r| r.cluster_ids.len()).collect();
        assert_eq!(sizes, vec![2, 3, 2, 3]);
    }

    #[test]
    fn single_partition_is_identity_split() {
        let d = dataset_with_clusters(&[10, 20, 30]);
        let plan = build_plan(&d, 1).unwrap();
        assert_eq!(plan.ranges.len(), 1);
        assert_eq!((plan.ranges[0].begin, plan.ranges[0].end), (0, 60));
        assert_eq!(plan.ranges[0].cluster_ids.len(), 3);
    }

    #[test]
    fn npartitions_clamped_to_cluster_count() {
        let d = dataset_with_clusters(&[5; 10]);
        let plan = build_plan(&d, 12).unwrap();
        assert_eq!(plan.npartitions_requested, 12);
        assert_eq!(plan.npartitions_effective, 10);
        assert!(plan.ranges.iter().all(|r| r.cluster_ids.len() == 1));
    }

    #[test]
    fn zero_partitions_rejected() {
        let d = dataset_with_clusters(&[5; 4]);
        assert_eq!(build_plan(&d, 0), Err(PlanError::InvalidPartitions(0)));
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut d = dataset_with_clusters(&[5; 4]);
        d.files.clear();
        assert!(matches!(build_plan(&d, 2), Err(PlanError::Invalid(ValidationError::EmptyDataset))));
    }

    #[test]
    fn plan_is_deterministic() {
        let d = uniform_dataset("d", DatasetKind::Synthetic, 3, &["a"], 3, 1000, 96, 7, false);
        assert_eq!(build_plan(&d, 7).unwrap(), build_plan(&d, 7).unwrap());
    }

    fn check_plan_invariants(d: &DatasetDescriptor, plan: &Plan) {
        let total = d.total_entries();
        let clusters = d.global_clusters();
        assert_eq!(plan.ranges.len(), plan.npartitions_effective as usize);

        // Sorted, disjoint, covering union.
        let mut next = 0u64;
        for r in &plan.ranges {
            assert_eq!(r.begin, next, "ranges must tile the entry space");
            assert!(r.begin < r.end);
            next = r.end;
        }
        assert_eq!(next, total);

        // Cluster alignment and exact cover.
        let mut covered = 0usize;
        for r in &plan.ranges {
            let mut entry_cursor = r.begin;
            for &(fi, ci) in &r.cluster_ids {
                let gc = clusters[covered];
                assert_eq!((gc.file_idx, gc.cluster_idx), (fi, ci));
                assert_eq!(gc.first_entry, entry_cursor);
                entry_cursor = gc.last_entry;
                covered += 1;
            }
            assert_eq!(entry_cursor, r.end);
        }
        assert_eq!(covered, clusters.len(), "every cluster assigned exactly once");

        // Balance within one cluster.
        let max = plan.ranges.iter().map(|r| r.cluster_ids.len()).max().unwrap();
        let min = plan.ranges.iter().map(|r| r.cluster_ids.len()).min().unwrap();
        assert!(max - min <= 1, "cluster-count balance violated: {min}..{max}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn coverage_disjointness_balance(
            spans in proptest::collection::vec(1u64..500, 1..200),
            nparts in 1u32..400,
        ) {
            let d = dataset_with_clusters(&spans);
            let plan = build_plan(&d, nparts).unwrap();
            check_plan_invariants(&d, &plan);
        }
    }
}
