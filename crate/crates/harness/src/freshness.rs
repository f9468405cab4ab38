//! Time from publishing an update to seeing it in query results, per path.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use ss_core::clock::SystemClock;
use ss_core::cluster::{Cluster, ClusterError, Master};
use ss_core::config::ClusterConfig;
use ss_core::log::UpdateLog;
use ss_core::query::{parse_query, Query};
use ss_core::schema::{UpdatePath, Value};
use ss_core::store::{FsStore, ObjectStore};

use crate::report::{BenchReport, Percentiles};
use crate::workload::{key_for, products_schema, Workload};

/// In-place updates must be visible within this many milliseconds.
pub const INPLACE_BOUND_MS: f64 = 1000.0;
/// Segment-path bound before scaling.
pub const SEGMENT_BOUND_MS: f64 = 60_000.0;

#[derive(Debug, Clone, Serialize)]
pub struct FreshnessParams {
    pub updates_per_path: usize,
    /// Factor applied to refresh age and poll interval, and to the
    /// segment-path bound.
    pub scale: f64,
    pub spacing_ms: u64,
    pub preload: u64,
    pub seed: u64,
    pub config: ClusterConfig,
}

impl FreshnessParams {
    pub fn new(updates_per_path: usize, scale: f64, seed: u64) -> Self {
        FreshnessParams {
            updates_per_path,
            scale,
            spacing_ms: 20,
            preload: 1000,
            seed,
            config: ClusterConfig::default().scaled(scale),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PathFreshness {
    pub path: UpdatePath,
    pub published: usize,
    pub unseen: usize,
    pub samples_ms: Vec<f64>,
    pub distribution_ms: Percentiles,
    /// Freshness target declared by the field's column family.
    pub family_sla_ms: u64,
    pub bound_ms: f64,
}

impl PathFreshness {
    pub fn within_bound(&self) -> bool {
        self.unseen == 0 && self.samples_ms.iter().all(|&s| s < self.bound_ms)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FreshnessRun {
    pub inplace: PathFreshness,
    pub segment: PathFreshness,
    /// Refresh age plus poll interval, the dominant segment-path terms.
    pub expected_segment_ms: u64,
}

impl FreshnessRun {
    pub fn report(&self, params: &FreshnessParams) -> BenchReport {
        BenchReport::new("freshness", params.seed, params, self)
    }
}

struct Probe {
    path: UpdatePath,
    key: String,
    query: Query,
    published: Instant,
    seen_ms: Option<f64>,
}

pub fn bench_freshness(params: &FreshnessParams) -> Result<FreshnessRun, ClusterError> {
    let dir = tempfile::tempdir()?;
    let schema = products_schema();
    let store: Arc<dyn ObjectStore> = Arc::new(FsStore::open(dir.path().join("store"))?);
    let log = Arc::new(UpdateLog::in_memory(schema.clone()));
    let cluster = Cluster::new(params.config.clone(), Arc::new(Master::new(&[])?), store, log, Arc::new(SystemClock))?;
    let mut workload = Workload::new(params.seed);
    for d in workload.docs(params.preload) {
        cluster.publish_doc(d)?;
    }
    cluster.drain(1)?;

    let n = params.updates_per_path;
    let half = (params.preload / 2).max(1);
    let segment_bound = SEGMENT_BOUND_MS * params.scale;
    let writer = cluster.write_nodes().remove(0);
    let searcher = cluster.search_nodes().remove(0);
    let reader = searcher.lock().unwrap().reader();
    let probes: Mutex<Vec<Probe>> = Mutex::new(Vec::new());
    let stop = AtomicBool::new(false);
    let mut result: Result<(), ClusterError> = Ok(());

    thread::scope(|s| {
        s.spawn(|| {
            while !stop.load(Ordering::Relaxed) {
                let _ = writer.lock().unwrap().tick();
                thread::sleep(Duration::from_millis(10));
            }
        });
        s.spawn(|| {
            while !stop.load(Ordering::Relaxed) {
                let _ = searcher.lock().unwrap().run_due();
                thread::sleep(Duration::from_millis(2));
            }
        });
        s.spawn(|| {
            while !stop.load(Ordering::Relaxed) {
                for p in probes.lock().unwrap().iter_mut().filter(|p| p.seen_ms.is_none()) {
                    if reader.query(&p.query, 10).iter().any(|h| h.key == p.key) {
                        p.seen_ms = Some(p.published.elapsed().as_secs_f64() * 1e3);
                    }
                }
                thread::sleep(Duration::from_millis(5));
            }
        });

        let mut publish = || -> Result<(), ClusterError> {
            for i in 0..n as u64 {
                // in-place: a unique price marker on an existing key
                let key = key_for(i % half);
                let marker = 1_000_000.0 + i as f64;
                let query = parse_query(&format!("price:[{marker} TO {marker}]"), &schema)?;
                let published = Instant::now();
                cluster.publish_update(&key, "price", Value::Float(marker))?;
                probes.lock().unwrap().push(Probe { path: UpdatePath::InPlace, key, query, published, seen_ms: None });

                // segment path: a new document or a re-created one with a unique title token
                let key = if i % 2 == 0 { key_for(params.preload + i) } else { key_for(half + i % half) };
                let mut doc = workload.doc(&key);
                doc.insert("title".into(), Value::Str(format!("fresh{i} {}", workload.title())));
                let query = parse_query(&format!("title:fresh{i}"), &schema)?;
                let published = Instant::now();
                cluster.publish_doc(doc)?;
                probes.lock().unwrap().push(Probe { path: UpdatePath::Segment, key, query, published, seen_ms: None });
                thread::sleep(Duration::from_millis(params.spacing_ms));
            }
            Ok(())
        };
        result = publish();
        let deadline = Instant::now() + Duration::from_secs_f64((segment_bound * 2.0).max(INPLACE_BOUND_MS * 2.0) / 1e3);
        while Instant::now() < deadline && probes.lock().unwrap().iter().any(|p| p.seen_ms.is_none()) {
            thread::sleep(Duration::from_millis(10));
        }
        stop.store(true, Ordering::Relaxed);
    });
    result?;

    let probes = probes.into_inner().unwrap();
    let path = |which: UpdatePath, family_field: &str, bound_ms: f64| {
        let mine: Vec<&Probe> = probes.iter().filter(|p| p.path == which).collect();
        let samples: Vec<f64> = mine.iter().filter_map(|p| p.seen_ms).collect();
        let family = &schema.field(family_field).expect("bundled field").column_family;
        PathFreshness {
            path: which,
            published: mine.len(),
            unseen: mine.len() - samples.len(),
            distribution_ms: Percentiles::of(&samples),
            samples_ms: samples,
            family_sla_ms: schema.family(family).map_or(0, |f| f.freshness_sla_ms),
            bound_ms,
        }
    };
    Ok(FreshnessRun {
        inplace: path(UpdatePath::InPlace, "price", INPLACE_BOUND_MS),
        segment: path(UpdatePath::Segment, "title", segment_bound),
        expected_segment_ms: params.config.refresh.max_age_ms + params.config.poll.interval_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_updates_give_empty_distributions() {
        let mut p = FreshnessParams::new(0, 0.01, 1);
        p.preload = 10;
        let r = bench_freshness(&p).unwrap();
        assert_eq!((r.inplace.published, r.segment.published), (0, 0));
        assert_eq!(r.inplace.distribution_ms.count, 0);
    }

    #[test]
    fn small_run_sees_every_update() {
        let mut p = FreshnessParams::new(10, 0.01, 2);
        p.preload = 100;
        let r = bench_freshness(&p).unwrap();
        assert_eq!((r.inplace.unseen, r.segment.unseen), (0, 0));
        assert_eq!(r.inplace.samples_ms.len(), 10);
    }
}
