//! Mergeable per-action accumulators.
//!
//! A worker returns one accumulator per action node; the client folds them
//! into the run result. Every merge is commutative and associative — counts
//! and histogram bins add exactly, means carry `(sum, count)` and divide only
//! at the very end — so the reduction outcome does not depend on the order in
//! which workers finish.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Accumulator {
    Count { n: u64 },
    Sum { sum: f64 },
    Mean { sum: f64, n: u64 },
    Histo1D {
        nbins: u32,
        lo: f64,
        hi: f64,
        underflow: u64,
        bins: Vec<u64>,
        overflow: u64,
    },
}

impl Accumulator {
    pub fn new_count() -> Self {
        Accumulator::Count { n: 0 }
    }

    pub fn new_sum() -> Self {
        Accumulator::Sum { sum: 0.0 }
    }

    pub fn new_mean() -> Self {
        Accumulator::Mean { sum: 0.0, n: 0 }
    }

    pub fn new_histo(nbins: u32, lo: f64, hi: f64) -> Self {
        Accumulator::Histo1D {
            nbins,
            lo,
            hi,
            underflow: 0,
            bins: vec![0; nbins as usize],
            overflow: 0,
        }
    }

    /// Feed one surviving row's value. `Count` ignores the value.
    #[inline]
    pub fn feed(&mut self, x: f64) {
        match self {
            Accumulator::Count { n } => *n += 1,
            Accumulator::Sum { sum } => *sum += x,
            Accumulator::Mean { sum, n } => {
                *sum += x;
                *n += 1;
            }
            Accumulator::Histo1D { nbins, lo, hi, underflow, bins, overflow } => {
                if x < *lo || x.is_nan() {
                    *underflow += 1;
                } else if x >= *hi {
                    *overflow += 1;
                } else {
                    let frac = (x - *lo) / (*hi - *lo);
                    let idx = ((frac * f64::from(*nbins)) as usize).min(*nbins as usize - 1);
                    bins[idx] += 1;
                }
            }
        }
    }

    /// True when both sides are the same action shape (same kind, and for
    /// histograms the same binning).
    pub fn same_shape(&self, other: &Self) -> bool {
        match (self, other) {
            (Accumulator::Count { .. }, Accumulator::Count { .. }) => true,
            (Accumulator::Sum { .. }, Accumulator::Sum { .. }) => true,
            (Accumulator::Mean { .. }, Accumulator::Mean { .. }) => true,
            (
                Accumulator::Histo1D { nbins: a, lo: al, hi: ah, .. },
                Accumulator::Histo1D { nbins: b, lo: bl, hi: bh, .. },
            ) => a == b && al == bl && ah == bh,
            _ => false,
        }
    }

    fn merge_from(&mut self, other: &Self) {
        match (self, other) {
            (Accumulator::Count { n }, Accumulator::Count { n: m }) => *n += m,
            (Accumulator::Sum { sum }, Accumulator::Sum { sum: s }) => *sum += s,
            (Accumulator::Mean { sum, n }, Accumulator::Mean { sum: s, n: m }) => {
                *sum += s;
                *n += m;
            }
            (
                Accumulator::Histo1D { underflow, bins, overflow, .. },
                Accumulator::Histo1D { underflow: u, bins: b, overflow: o, .. },
            ) => {
                *underflow += u;
                *overflow += o;
                for (dst, src) in bins.iter_mut().zip(b) {
                    *dst += src;
                }
            }
            _ => unreachable!("shape checked before merge"),
        }
    }

    /// Resolve the accumulator into its reported value.
    pub fn finalize(&self) -> FinalValue {
        match self {
            Accumulator::Count { n } => FinalValue::Count(*n),
            Accumulator::Sum { sum } => FinalValue::Sum(*sum),
            Accumulator::Mean { sum, n } => FinalValue::Mean(if *n == 0 {
                f64::NAN
            } else {
                sum / *n as f64
            }),
            Accumulator::Histo1D { underflow, bins, overflow, .. } => FinalValue::Histo {
                underflow: *underflow,
                bins: bins.clone(),
                overflow: *overflow,
            },
        }
    }
}

/// Finalized, user-facing value of one action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FinalValue {
    Count(u64),
    Sum(f64),
    Mean(f64),
    Histo { underflow: u64, bins: Vec<u64>, overflow: u64 },
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("shape mismatch for action {action}")]
pub struct ShapeMismatch {
    pub action: u32,
}

/// One worker's accumulators for one range, keyed by action id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartialResult {
    pub actions: BTreeMap<u32, Accumulator>,
}

impl PartialResult {
    /// Merge `other` into `self`. Both sides must come from the same graph:
    /// the same action ids with the same shapes.
    pub fn merge(&mut self, other: &PartialResult) -> Result<(), ShapeMismatch> {
        if self.actions.len() != other.actions.len() {
            let action = other
                .actions
                .keys()
                .find(|k| !self.actions.contains_key(*k))
                .or_else(|| self.actions.keys().find(|k| !other.actions.contains_key(*k)))
                .copied()
                .unwrap_or(0);
            return Err(ShapeMismatch { action });
        }
        for (id, acc) in &other.actions {
            let Some(mine) = self.actions.get_mut(id) else {
                return Err(ShapeMismatch { action: *id });
            };
            if !mine.same_shape(acc) {
                return Err(ShapeMismatch { action: *id });
            }
            mine.merge_from(acc);
        }
        Ok(())
    }

    /// All-zero accumulators with the same shape: the merge identity.
    pub fn identity_like(&self) -> PartialResult {
        let actions = self
            .actions
            .iter()
            .map(|(id, acc)| {
                let zero = match acc {
                    Accumulator::Count { .. } => Accumulator::new_count(),
                    Accumulator::Sum { .. } => Accumulator::new_sum(),
                    Accumulator::Mean { .. } => Accumulator::new_mean(),
                    Accumulator::Histo1D { nbins, lo, hi, .. } => Accumulator::new_histo(*nbins, *lo, *hi),
                };
                (*id, zero)
            })
            .collect();
        PartialResult { actions }
    }

    pub fn finalize(&self) -> BTreeMap<u32, FinalValue> {
        self.actions.iter().map(|(id, a)| (*id, a.finalize())).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("partial result serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn histo(bins: Vec<u64>) -> Accumulator {
        Accumulator::Histo1D {
            nbins: bins.len() as u32,
            lo: 0.0,
            hi: 1.0,
            underflow: 0,
            bins,
            overflow: 0,
        }
    }

    #[test]
    fn histogram_merge_is_binwise() {
        let mut a = PartialResult { actions: [(0, histo(vec![1, 1, 1]))].into() };
        let b = PartialResult { actions: [(0, histo(vec![0, 2, 0]))].into() };
        a.merge(&b).unwrap();
        match &a.actions[&0] {
            Accumulator::Histo1D { bins, .. } => assert_eq!(bins, &vec![1, 3, 1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mean_merges_componentwise_and_finalizes_late() {
        let mut a = PartialResult { actions: [(3, Accumulator::Mean { sum: 10.0, n: 4 })].into() };
        let b = PartialResult { actions: [(3, Accumulator::Mean { sum: 2.0, n: 1 })].into() };
        a.merge(&b).unwrap();
        assert_eq!(a.actions[&3], Accumulator::Mean { sum: 12.0, n: 5 });
        assert_eq!(a.finalize()[&3], FinalValue::Mean(2.4));
    }

    #[test]
    fn identity_element_leaves_result_unchanged() {
        let mut a = PartialResult {
            actions: [
                (0, Accumulator::Count { n: 7 }),
                (1, Accumulator::Mean { sum: 1.5, n: 3 }),
                (2, histo(vec![4, 0, 9])),
            ]
            .into(),
        };
        let before = a.clone();
        let id = a.identity_like();
        a.merge(&id).unwrap();
        assert_eq!(a, before);
    }

    #[test]
    fn mismatched_ids_rejected() {
        let mut a = PartialResult { actions: [(0, Accumulator::new_count())].into() };
        let b = PartialResult { actions: [(1, Accumulator::new_count())].into() };
        assert_eq!(a.merge(&b), Err(ShapeMismatch { action: 1 }));
    }

    #[test]
    fn mismatched_histogram_binning_rejected() {
        let mut a = PartialResult { actions: [(0, histo(vec![0; 3]))].into() };
        let b = PartialResult { actions: [(0, histo(vec![0; 4]))].into() };
        assert_eq!(a.merge(&b), Err(ShapeMismatch { action: 0 }));
    }

    #[test]
    fn histogram_boundaries() {
        let mut h = Accumulator::new_histo(10, 0.0, 1.0);
        h.feed(-0.01);
        h.feed(0.0);
        h.feed(0.999_999);
        h.feed(1.0);
        h.feed(f64::NAN);
        match h {
            Accumulator::Histo1D { underflow, ref bins, overflow, .. } => {
                assert_eq!(underflow, 2); // negative + NaN
                assert_eq!(overflow, 1);
                assert_eq!(bins[0], 1);
                assert_eq!(bins[9], 1);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let a = PartialResult {
            actions: [(0, Accumulator::Mean { sum: 0.1 + 0.2, n: 2 }), (1, histo(vec![1, 2]))].into(),
        };
        assert_eq!(PartialResult::decode(&a.encode()).unwrap(), a);
    }
}
