//! Workload generators, benchmarks and reports for ss-core.

pub mod contention;
pub mod freshness;
pub mod merge;
pub mod report;
pub mod waf;
pub mod workload;
