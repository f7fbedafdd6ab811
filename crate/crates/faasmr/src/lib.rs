//! A serverless map-reduce engine for columnar datasets.
//!
//! The engine splits a dataset into cluster-aligned entry ranges, ships each
//! range together with a declarative computation graph to one serverless
//! function invocation, and merges the per-range partial results into the
//! final answer. Two execution backends are provided behind one interface: a
//! deterministic discrete-event simulator that models invocation throttling,
//! cold/warm container starts and remote-read costs, and a local backend that
//! runs real worker processes over loopback sockets.

pub mod client;
pub mod dataset;
pub mod expr;
pub mod graph;
pub mod monitor;
pub mod payload;
pub mod planner;
pub mod platform;
pub mod report;
pub mod result;
pub mod rng;
pub mod storage;
pub mod worker;
pub mod workloads;
