//! Merge-policy cost: replays unit segments through a memindex.

use std::sync::Arc;

use serde::Serialize;
use ss_core::memindex::{MemIndex, MergePolicy};
use ss_core::schema::{Document, IndexSchema, Value};
use ss_core::segment::{SegmentBuffer, SegmentError, SegmentView};

use crate::report::BenchReport;
use crate::workload::products_schema;

pub fn policy_name(p: MergePolicy) -> &'static str {
    match p {
        MergePolicy::Immediate => "immediate",
        MergePolicy::NoMerge => "no-merge",
        MergePolicy::Logarithmic { .. } => "logarithmic",
    }
}

pub fn parse_policy(name: &str, unit: u32) -> Option<MergePolicy> {
    match name {
        "immediate" => Some(MergePolicy::Immediate),
        "no-merge" => Some(MergePolicy::NoMerge),
        "logarithmic" => Some(MergePolicy::Logarithmic { unit }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeRun {
    pub policy: &'static str,
    pub n: u64,
    pub unit: u32,
    /// Documents copied by merges, summed over the run.
    pub merge_volume: u64,
    pub merges: u64,
    pub final_sub_indexes: usize,
    pub max_sub_indexes: usize,
    /// Logarithmic policy only: whether the sub-index count stayed within
    /// `log2(docs / unit) + 1` after every incorporation.
    pub log_bound_held: Option<bool>,
}

impl MergeRun {
    pub fn report(&self) -> BenchReport {
        BenchReport::new(
            "merge-policy",
            0,
            serde_json::json!({"policy": self.policy, "n": self.n, "unit": self.unit}),
            self,
        )
    }
}

fn unit_doc(i: u64) -> Document {
    Document::from([("id".to_string(), Value::Str(format!("u{i:08}"))), ("title".to_string(), Value::Str("unit".into()))])
}

fn unit_segment(schema: &Arc<IndexSchema>, first: u64, unit: u32, segment_id: u64) -> Result<Vec<u8>, SegmentError> {
    let mut b = SegmentBuffer::new(schema.clone());
    for i in first..first + u64::from(unit) {
        b.add(&unit_doc(i), i)?;
    }
    b.seal(segment_id)
}

/// Incorporates `n / unit` segments of `unit` documents each.
pub fn bench_merge_policy(policy: MergePolicy, n: u64, unit: u32) -> Result<MergeRun, SegmentError> {
    assert!(unit >= 1 && n >= u64::from(unit), "need n >= unit >= 1");
    let schema = products_schema();
    let mut index = MemIndex::new(schema.clone(), policy);
    let segments = n / u64::from(unit);
    let bound = |docs: u64| (63 - (docs / u64::from(unit)).max(1).leading_zeros()) as usize + 1;
    let mut log_bound_held = true;
    let mut max_sub_indexes = 0;
    for s in 0..segments {
        let bytes = unit_segment(&schema, s * u64::from(unit), unit, s + 1)?;
        let view = SegmentView::open(&bytes, schema.clone())?;
        index.incorporate(&view).expect("segments arrive in id order");
        let count = index.sub_index_count();
        max_sub_indexes = max_sub_indexes.max(count);
        log_bound_held &= count <= bound((s + 1) * u64::from(unit));
    }
    let stats = index.stats();
    Ok(MergeRun {
        policy: policy_name(policy),
        n,
        unit,
        merge_volume: stats.doc_copies,
        merges: stats.merges,
        final_sub_indexes: index.sub_index_count(),
        max_sub_indexes,
        log_bound_held: matches!(policy, MergePolicy::Logarithmic { .. }).then_some(log_bound_held),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_match_closed_forms() {
        let n = 64;
        assert_eq!(bench_merge_policy(MergePolicy::Immediate, n, 1).unwrap().merge_volume, n * (n + 1) / 2);
        let none = bench_merge_policy(MergePolicy::NoMerge, n, 1).unwrap();
        assert_eq!((none.merge_volume, none.final_sub_indexes), (0, 64));
        let log = bench_merge_policy(MergePolicy::Logarithmic { unit: 1 }, n, 1).unwrap();
        assert_eq!((log.merge_volume, log.final_sub_indexes), (n * 6, 1));
        assert_eq!(log.log_bound_held, Some(true));
        assert_eq!(none.log_bound_held, None);
    }

    #[test]
    fn policy_names_round_trip() {
        for p in [MergePolicy::Immediate, MergePolicy::NoMerge, MergePolicy::Logarithmic { unit: 4 }] {
            assert_eq!(parse_policy(policy_name(p), 4), Some(p));
        }
        assert_eq!(parse_policy("tiered", 1), None);
    }
}
