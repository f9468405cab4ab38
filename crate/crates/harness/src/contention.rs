//! Query latency under concurrent ingestion, isolated versus co-located.
//!
//! Both modes serve queries from the search node's loop. In the isolated
//! mode the write node runs on its own thread; in the co-located control the
//! same loop also consumes documents and builds segments.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;
use ss_core::clock::{Clock, SystemClock};
use ss_core::cluster::{Cluster, ClusterError, NodeReport, NodeRole};
use ss_core::config::ClusterConfig;
use ss_core::log::{UpdateLog, UpdateRecord};
use ss_core::memindex::{MemIndex, MergePolicy};
use ss_core::query::{parse_query, Query};
use ss_core::segment::{SegmentBuffer, SegmentView};
use ss_core::store::{FsStore, ObjectStore};

use crate::report::{BenchReport, Percentiles};
use crate::workload::{key_for, products_schema, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Isolated,
    Colocated,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContentionParams {
    pub qps: f64,
    pub ingest_rate: f64,
    pub duration_ms: u64,
    pub preload: u64,
    pub seed: u64,
    pub config: ClusterConfig,
}

impl ContentionParams {
    pub fn new(qps: f64, ingest_rate: f64, duration_ms: u64, seed: u64) -> Self {
        let mut config = ClusterConfig::default();
        config.refresh.max_docs = 512;
        config.refresh.max_age_ms = 200;
        config.poll.interval_ms = 100;
        config.merge.unit = 512;
        ContentionParams { qps, ingest_rate, duration_ms, preload: 2000, seed, config }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeRun {
    pub mode: Mode,
    pub ingest_rate: f64,
    pub queries: usize,
    /// Time inside query execution only.
    pub execute_us: Percentiles,
    /// Time from a query's scheduled arrival to its completion.
    pub response_us: Percentiles,
    pub docs_published: u64,
    pub write_errors: u64,
    pub nodes: Vec<NodeReport>,
    /// Work done by the single loop of the co-located mode, summed over the
    /// write and search roles it runs.
    pub shared_loop: Option<LoopTotals>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoopTotals {
    pub store_puts: u64,
    pub segment_writer_calls: u64,
    pub query_executions: u64,
}

impl ModeRun {
    /// Sums of store puts and segment-writer calls by search nodes, and of
    /// query executions by write nodes.
    pub fn isolation_counters(&self) -> (u64, u64, u64) {
        let mut search_puts = 0;
        let mut search_writer = 0;
        let mut write_queries = 0;
        for n in &self.nodes {
            match n.role {
                NodeRole::Search => {
                    search_puts += n.io.puts;
                    search_writer += n.counters.segment_writer_calls;
                }
                NodeRole::Write => write_queries += n.counters.query_executions,
            }
        }
        (search_puts, search_writer, write_queries)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ContentionRun {
    pub baseline: ModeRun,
    pub isolated: ModeRun,
    pub colocated: ModeRun,
    /// Co-located over isolated percentiles of response time.
    pub response_ratio_p50: f64,
    pub response_ratio_p99: f64,
    pub execute_ratio_p99: f64,
    /// Isolated p99 response with ingestion over the no-ingestion baseline.
    pub isolated_regression_p99: f64,
}

impl ContentionRun {
    pub fn report(&self, params: &ContentionParams) -> BenchReport {
        BenchReport::new("contention", params.seed, params, self)
    }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b > 0.0 {
        a / b
    } else {
        f64::NAN
    }
}

/// Runs the no-ingestion baseline, then both modes with ingestion.
pub fn bench_contention(params: &ContentionParams) -> Result<ContentionRun, ClusterError> {
    let baseline = run_mode(params, Mode::Isolated, 0.0)?;
    let isolated = run_mode(params, Mode::Isolated, params.ingest_rate)?;
    let colocated = run_mode(params, Mode::Colocated, params.ingest_rate)?;
    Ok(ContentionRun {
        response_ratio_p50: ratio(colocated.response_us.p50, isolated.response_us.p50),
        response_ratio_p99: ratio(colocated.response_us.p99, isolated.response_us.p99),
        execute_ratio_p99: ratio(colocated.execute_us.p99, isolated.execute_us.p99),
        isolated_regression_p99: ratio(isolated.response_us.p99, baseline.response_us.p99),
        baseline,
        isolated,
        colocated,
    })
}

pub fn run_mode(params: &ContentionParams, mode: Mode, ingest_rate: f64) -> Result<ModeRun, ClusterError> {
    let dir = tempfile::tempdir()?;
    let schema = products_schema();
    let store: Arc<dyn ObjectStore> = Arc::new(FsStore::open(dir.path().join("store"))?);
    let log = Arc::new(UpdateLog::in_memory(schema.clone()));
    let master = Arc::new(ss_core::cluster::Master::new(&[])?);
    let cluster = Cluster::new(params.config.clone(), master, store, log.clone(), Arc::new(SystemClock))?;

    let mut workload = Workload::new(params.seed);
    for d in workload.docs(params.preload) {
        cluster.publish_doc(d)?;
    }
    cluster.drain(1)?;
    let pool: Vec<Query> =
        (0..256).map(|_| parse_query(&workload.query(), &schema).expect("generated queries parse")).collect();

    let writer = cluster.write_nodes().remove(0);
    let searcher = cluster.search_nodes().remove(0);
    let reader = searcher.lock().unwrap().reader();
    let stop = AtomicBool::new(false);
    let published = AtomicU64::new(0);
    let write_errors = AtomicU64::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Instant)>();
    let duration = Duration::from_millis(params.duration_ms);
    let topic = schema.document_topic();
    let mut exec = Vec::new();
    let mut resp = Vec::new();

    thread::scope(|s| {
        if ingest_rate > 0.0 {
            let mut w = Workload::new(params.seed ^ 0x5eed);
            let (stop, published, log, topic) = (&stop, &published, &log, &topic);
            s.spawn(move || {
                let start = Instant::now();
                while !stop.load(Ordering::Relaxed) {
                    let target = (start.elapsed().as_secs_f64() * ingest_rate) as u64;
                    while published.load(Ordering::Relaxed) < target {
                        let i = params.preload + published.fetch_add(1, Ordering::Relaxed);
                        let key = key_for(i);
                        let rec = UpdateRecord::doc(key.clone(), w.doc(&key), SystemClock.now_ms());
                        log.append(topic, rec).expect("document topic exists");
                    }
                    thread::sleep(Duration::from_millis(2));
                }
            });
        }
        if mode == Mode::Isolated {
            let (stop, writer, write_errors) = (&stop, &writer, &write_errors);
            s.spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    if writer.lock().unwrap().tick().is_err() {
                        write_errors.fetch_add(1, Ordering::Relaxed);
                    }
                    thread::sleep(Duration::from_millis(5));
                }
            });
        }
        {
            let qps = params.qps;
            let n = pool.len();
            s.spawn(move || {
                let start = Instant::now();
                let gap = Duration::from_secs_f64(1.0 / qps);
                let mut next = start;
                let mut i = 0;
                while next.duration_since(start) < duration {
                    let now = Instant::now();
                    if next > now {
                        thread::sleep(next - now);
                    }
                    if tx.send((i % n, next)).is_err() {
                        break;
                    }
                    i += 1;
                    next += gap;
                }
            });
        }
        // the search node loop
        loop {
            if let Err(_e) = searcher.lock().unwrap().run_due() {
                write_errors.fetch_add(1, Ordering::Relaxed);
            }
            if mode == Mode::Colocated && writer.lock().unwrap().tick().is_err() {
                write_errors.fetch_add(1, Ordering::Relaxed);
            }
            match rx.recv_timeout(Duration::from_millis(2)) {
                Ok(first) => {
                    let mut batch = vec![first];
                    batch.extend(rx.try_iter());
                    for (qi, scheduled) in batch {
                        let t = Instant::now();
                        std::hint::black_box(reader.query(&pool[qi], 10));
                        let done = Instant::now();
                        exec.push((done - t).as_secs_f64() * 1e6);
                        resp.push(done.saturating_duration_since(scheduled).as_secs_f64() * 1e6);
                    }
                }
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
        }
        stop.store(true, Ordering::Relaxed);
    });

    let nodes = cluster.node_reports();
    Ok(ModeRun {
        mode,
        ingest_rate,
        queries: exec.len(),
        execute_us: Percentiles::of(&exec),
        response_us: Percentiles::of(&resp),
        docs_published: published.load(Ordering::Relaxed),
        write_errors: write_errors.load(Ordering::Relaxed),
        shared_loop: (mode == Mode::Colocated).then(|| {
            nodes.iter().fold(LoopTotals::default(), |mut acc, n| {
                acc.store_puts += n.io.puts;
                acc.segment_writer_calls += n.counters.segment_writer_calls;
                acc.query_executions += n.counters.query_executions;
                acc
            })
        }),
        nodes,
    })
}

/// Process-wide write counters from `/proc/self/io`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProcIo {
    pub wchar: u64,
    pub syscw: u64,
    pub write_bytes: u64,
}

pub fn proc_io() -> Option<ProcIo> {
    let text = std::fs::read_to_string("/proc/self/io").ok()?;
    let field = |name: &str| {
        text.lines().find_map(|l| l.strip_prefix(name)?.strip_prefix(": ")?.trim().parse::<u64>().ok())
    };
    Some(ProcIo { wchar: field("wchar")?, syscw: field("syscw")?, write_bytes: field("write_bytes")? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IncorporateIo {
    pub segments: usize,
    pub docs: u64,
    pub syscw: u64,
    pub wchar: u64,
}

/// Seals segments up front, then counts the process's write syscalls
/// across a run of `incorporate` calls alone. Must not run concurrently
/// with other writers in the same process. `None` without `/proc/self/io`.
pub fn measure_incorporate_writes(seed: u64, segments: usize, docs_per_segment: u64) -> Option<IncorporateIo> {
    let schema = products_schema();
    let mut w = Workload::new(seed);
    let mut sealed = Vec::new();
    for s in 0..segments as u64 {
        let mut b = SegmentBuffer::new(schema.clone());
        for i in 0..docs_per_segment {
            let key = key_for(s * docs_per_segment + i);
            b.add(&w.doc(&key), s).ok()?;
        }
        sealed.push(b.seal(s + 1).ok()?);
    }
    let views: Vec<SegmentView> = sealed.iter().map(|b| SegmentView::open(b, schema.clone())).collect::<Result<_, _>>().ok()?;
    let mut index = MemIndex::new(schema, MergePolicy::Logarithmic { unit: docs_per_segment as u32 });
    let before = proc_io()?;
    for v in &views {
        index.incorporate(v).ok()?;
    }
    let after = proc_io()?;
    std::hint::black_box(index.live_count());
    Some(IncorporateIo {
        segments,
        docs: segments as u64 * docs_per_segment,
        syscw: after.syscw - before.syscw,
        wchar: after.wchar - before.wchar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_run_keeps_roles_apart() {
        let mut p = ContentionParams::new(200.0, 2000.0, 400, 3);
        p.preload = 300;
        let run = run_mode(&p, Mode::Isolated, p.ingest_rate).unwrap();
        assert!(run.queries > 20);
        assert_eq!(run.isolation_counters(), (0, 0, 0));
        let co = run_mode(&p, Mode::Colocated, p.ingest_rate).unwrap();
        assert!(co.queries > 20);
    }

    #[test]
    fn proc_io_parses_when_present() {
        if std::path::Path::new("/proc/self/io").exists() {
            assert!(proc_io().is_some());
        }
    }
}
