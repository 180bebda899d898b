//! Deterministic, desk-scale simulator for a four-tier KV-cache memory
//! hierarchy: cumulative attention scoring, tier assignment with protected
//! regions, offload/prefetch accounting, eviction baselines, an analytical
//! PCIe transfer cost model, and the exact statistics used for reporting.
//!
//! All floating-point reductions run in `f64` with a canonical
//! ascending-position summation order, so partition-independence of the
//! attention output can be checked as bitwise equality.

pub mod attention;
pub mod baselines;
pub mod cost;
pub mod experiment;
pub mod props;
pub mod scoring;
pub mod stats;
pub mod tier;
pub mod workload;
