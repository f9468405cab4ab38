//! Write amplification of the upload path against merge-and-rewrite
//! simulations.

use std::sync::Arc;

use serde::Serialize;
use ss_core::clock::ManualClock;
use ss_core::cluster::{Cluster, ClusterError, NodeRole};
use ss_core::config::ClusterConfig;
use ss_core::memindex::{merge_plan, MergePolicy};
use ss_core::schema::{Document, IndexSchema};
use ss_core::segment::{SegmentBuffer, SegmentError};

use crate::merge::{bench_merge_policy, policy_name};
use crate::report::BenchReport;
use crate::workload::{products_schema, raw_bytes, Workload};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewriteSim {
    pub policy: &'static str,
    pub n: usize,
    pub raw_bytes: u64,
    /// Bytes of every segment file sealed, including merge outputs.
    pub bytes_written: u64,
    pub waf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WafRun {
    pub docs: usize,
    pub raw_bytes: u64,
    pub segments: u64,
    pub store_puts: u64,
    pub store_put_bytes: u64,
    /// Store-put bytes over raw document bytes; `None` for an empty workload.
    pub upload_waf: Option<f64>,
    pub log_encoded_bytes: u64,
    pub log_waf: Option<f64>,
    pub simulations: Vec<RewriteSim>,
    /// Documents copied per ingested document by an immediate-merge memindex.
    pub immediate_doc_copy_waf: f64,
}

impl WafRun {
    pub fn report(&self, seed: u64, config: &ClusterConfig) -> BenchReport {
        BenchReport::new("waf", seed, config, self)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn seal(schema: &Arc<IndexSchema>, docs: &[&Document], id: u64) -> Result<u64, SegmentError> {
    let mut b = SegmentBuffer::new(schema.clone());
    for d in docs {
        b.add(d, 0)?;
    }
    Ok(b.seal(id)?.len() as u64)
}

/// Writes each document as a one-document segment and, for merging
/// policies, re-seals every merge output as a new segment file.
pub fn simulate_rewrites(policy: MergePolicy, docs: &[Document]) -> Result<RewriteSim, SegmentError> {
    let schema = products_schema();
    let raw: u64 = docs.iter().map(raw_bytes).sum();
    let mut written = 0u64;
    let mut next_id = 1u64;
    let mut groups: Vec<Vec<&Document>> = Vec::new();
    for d in docs {
        written += seal(&schema, &[d], next_id)?;
        next_id += 1;
        match policy {
            MergePolicy::NoMerge => {}
            MergePolicy::Immediate => {
                groups.push(vec![d]);
                if groups.len() > 1 {
                    let all: Vec<&Document> = groups.drain(..).flatten().collect();
                    written += seal(&schema, &all, next_id)?;
                    next_id += 1;
                    groups.push(all);
                }
            }
            MergePolicy::Logarithmic { unit } => {
                groups.push(vec![d]);
                let sizes: Vec<u64> = groups.iter().map(|g| g.len() as u64).collect();
                for (i, j) in merge_plan(&sizes, unit) {
                    let tail = groups.remove(j);
                    groups[i].extend(tail);
                    written += seal(&schema, &groups[i], next_id)?;
                    next_id += 1;
                }
            }
        }
    }
    Ok(RewriteSim { policy: policy_name(policy), n: docs.len(), raw_bytes: raw, bytes_written: written, waf: ratio(written, raw) })
}

/// Ingests `docs` through a single-shard cluster and measures store-put
/// bytes; then runs rewrite simulations over the first `sim_n` documents.
pub fn bench_waf(docs: &[Document], config: &ClusterConfig, sim_n: usize) -> Result<WafRun, ClusterError> {
    let schema = products_schema();
    let clock = Arc::new(ManualClock::new(1));
    let c = Cluster::in_memory(schema, config.clone(), clock.clone(), &[])?;
    let raw: u64 = docs.iter().map(raw_bytes).sum();
    for (i, d) in docs.iter().enumerate() {
        c.publish_doc(d.clone())?;
        clock.advance(1);
        if i % 256 == 255 {
            let round = c.tick_write();
            if let Some((_, e)) = round.errors.into_iter().next() {
                return Err(e);
            }
        }
    }
    c.drain(1)?;
    let mut puts = 0;
    let mut put_bytes = 0;
    let mut segments = 0;
    for r in c.node_reports() {
        if r.role == NodeRole::Write {
            puts += r.io.puts;
            put_bytes += r.io.put_bytes;
        }
    }
    for w in c.write_nodes() {
        segments += w.lock().unwrap().stats().segments;
    }
    let log = c.log().stats();
    let sim_docs = &docs[..sim_n.min(docs.len())];
    let mut simulations = Vec::new();
    for p in [MergePolicy::Immediate, MergePolicy::Logarithmic { unit: 1 }, MergePolicy::NoMerge] {
        simulations.push(simulate_rewrites(p, sim_docs)?);
    }
    let immediate_doc_copy_waf = if sim_docs.is_empty() {
        0.0
    } else {
        let n = sim_docs.len() as u64;
        bench_merge_policy(MergePolicy::Immediate, n, 1)?.merge_volume as f64 / n as f64
    };
    Ok(WafRun {
        docs: docs.len(),
        raw_bytes: raw,
        segments,
        store_puts: puts,
        store_put_bytes: put_bytes,
        upload_waf: ratio(put_bytes, raw),
        log_encoded_bytes: log.encoded_bytes,
        log_waf: ratio(log.encoded_bytes, raw),
        simulations,
        immediate_doc_copy_waf,
    })
}

/// The standard seeded workload: `n` fresh documents.
pub fn standard_docs(seed: u64, n: u64) -> Vec<Document> {
    Workload::new(seed).docs(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_workload_is_not_applicable() {
        let r = bench_waf(&[], &ClusterConfig::default(), 0).unwrap();
        assert_eq!((r.upload_waf, r.segments, r.store_puts), (None, 0, 0));
    }

    #[test]
    fn every_segment_uploaded_once() {
        let mut config = ClusterConfig::default();
        config.refresh.max_docs = 100;
        let r = bench_waf(&standard_docs(1, 1000), &config, 16).unwrap();
        assert_eq!(r.segments, 10);
        assert_eq!(r.store_puts, 10);
        let sims: Vec<f64> = r.simulations.iter().map(|s| s.waf.unwrap()).collect();
        assert!(sims[0] > sims[1] && sims[1] > sims[2], "{sims:?}");
        assert_eq!(r.immediate_doc_copy_waf, 8.5);
    }
}
