//! Node roles and coordination.
//!
//! Write nodes consume full documents from segment-path topics, buffer them,
//! seal segments and upload them to the object store. Search nodes poll the
//! store for new segments, incorporate them into their in-memory index and
//! consume in-place updates straight from the log. The two roles share no
//! state: the store and the log are the only channels between them. The
//! [`Master`] owns the shard table, segment-id reservations and splits.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::config::{ClusterConfig, RefreshConfig};
use crate::log::{LogError, Payload, UpdateLog, UpdateRecord};
use crate::memindex::{KeyRange, MemIndex, MemIndexError, MergePolicy, ReadSnapshot};
use crate::metrics::{self, CounterValues, NodeCounters};
use crate::query::{execute, merge_hits, parse_query, Hit, Query, QueryError};
use crate::schema::{Document, FieldId, IndexSchema, SchemaError, UpdatePath, Value};
use crate::segment::{parse_segment_key, segment_key, segment_prefix, SegmentBuffer, SegmentError, SegmentView};
use crate::store::{InstrumentedStore, IoStats, ObjectStore, StoreError};

/// Pending in-place updates kept per search node for keys it has not seen.
pub const UNKNOWN_KEY_CAP: usize = 100_000;
const READ_BATCH: usize = 1024;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Index(#[from] MemIndexError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("unknown shard {0}")]
    UnknownShard(u32),
    #[error("metadata: {0}")]
    Meta(String),
    #[error("metadata i/o: {0}")]
    Io(#[from] io::Error),
    #[error("metadata encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Write,
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardDescriptor {
    pub shard_id: u32,
    pub range: KeyRange,
    pub write_node: String,
    pub search_nodes: Vec<String>,
    pub last_sealed: Option<u64>,
    pub footprint: u64,
    /// Retired shards whose segments this shard also serves, oldest first.
    pub ancestors: Vec<u32>,
    pub retired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reservation {
    pub shard_id: u32,
    pub segment_id: u64,
    /// Log position per topic that the segment covers.
    pub end_offsets: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub role: NodeRole,
    pub shard_id: u32,
    pub last_heartbeat_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaState {
    pub shards: Vec<ShardDescriptor>,
    pub nodes: BTreeMap<String, NodeInfo>,
    pub reservations: BTreeMap<u32, Reservation>,
    pub next_shard_id: u32,
    pub next_segment_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub parent: u32,
    pub split_key: String,
    pub left: KeyRange,
    pub right: KeyRange,
    pub left_footprint: u64,
    pub right_footprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitDecision {
    NotNeeded { footprint: u64, threshold: u64 },
    Unsplittable { shard_id: u32, distinct_keys: usize },
    Split(SplitPlan),
}

pub fn write_node_name(shard: u32) -> String {
    format!("write-{shard}")
}

pub fn search_node_name(shard: u32) -> String {
    format!("search-{shard}")
}

fn write_group(shard: u32) -> String {
    format!("write-shard-{shard}")
}

fn search_group(shard: u32) -> String {
    format!("search-shard-{shard}")
}

/// Single metadata authority. Every mutation is serialized and, when a
/// path is configured, persisted as a JSON snapshot.
pub struct Master {
    state: Mutex<MetaState>,
    path: Option<PathBuf>,
}

impl Master {
    /// A fresh shard table with one shard per interval between `boundaries`.
    pub fn new(boundaries: &[&str]) -> Result<Master, ClusterError> {
        let mut b: Vec<&str> = boundaries.to_vec();
        b.sort_unstable();
        b.dedup();
        if b.iter().any(|s| s.is_empty()) {
            return Err(ClusterError::Meta("empty shard boundary".into()));
        }
        let mut state = MetaState { next_segment_id: 1, ..MetaState::default() };
        let mut lo = String::new();
        for hi in b.iter().map(|s| Some(s.to_string())).chain([None]) {
            let id = state.next_shard_id;
            state.next_shard_id += 1;
            state.shards.push(ShardDescriptor {
                shard_id: id,
                range: KeyRange { lo: lo.clone(), hi: hi.clone() },
                write_node: write_node_name(id),
                search_nodes: vec![search_node_name(id)],
                last_sealed: None,
                footprint: 0,
                ancestors: Vec::new(),
                retired: false,
            });
            lo = hi.unwrap_or_default();
        }
        let m = Master { state: Mutex::new(state), path: None };
        m.check_partition().map_err(ClusterError::Meta)?;
        Ok(m)
    }

    /// Loads the snapshot at `path`, or creates one with `boundaries`.
    pub fn open(path: impl Into<PathBuf>, boundaries: &[&str]) -> Result<Master, ClusterError> {
        let path = path.into();
        let mut m = if path.exists() {
            let state: MetaState = serde_json::from_slice(&fs::read(&path)?)?;
            Master { state: Mutex::new(state), path: None }
        } else {
            Master::new(boundaries)?
        };
        m.path = Some(path);
        m.check_partition().map_err(ClusterError::Meta)?;
        m.persist(&m.lock())?;
        Ok(m)
    }

    fn lock(&self) -> MutexGuard<'_, MetaState> {
        self.state.lock().unwrap()
    }

    fn persist(&self, state: &MetaState) -> Result<(), ClusterError> {
        if let Some(path) = &self.path {
            let tmp = path.with_extension("tmp");
            fs::write(&tmp, serde_json::to_vec_pretty(state)?)?;
            fs::rename(&tmp, path)?;
        }
        Ok(())
    }

    pub fn state(&self) -> MetaState {
        self.lock().clone()
    }

    pub fn shards(&self) -> Vec<ShardDescriptor> {
        self.lock().shards.clone()
    }

    pub fn active_shards(&self) -> Vec<ShardDescriptor> {
        self.lock().shards.iter().filter(|s| !s.retired).cloned().collect()
    }

    pub fn shard(&self, id: u32) -> Result<ShardDescriptor, ClusterError> {
        self.lock().shards.iter().find(|s| s.shard_id == id).cloned().ok_or(ClusterError::UnknownShard(id))
    }

    /// The active shard whose range contains `key`.
    pub fn route(&self, key: &str) -> Result<u32, ClusterError> {
        if key.is_empty() {
            return Err(ClusterError::Meta("empty routing key".into()));
        }
        let st = self.lock();
        let mut found = st.shards.iter().filter(|s| !s.retired && s.range.contains(key)).map(|s| s.shard_id);
        let id = found.next().ok_or_else(|| ClusterError::Meta(format!("no shard covers `{key}`")))?;
        debug_assert!(found.next().is_none());
        Ok(id)
    }

    /// Checks that active shard ranges are disjoint and cover the keyspace.
    pub fn check_partition(&self) -> Result<(), String> {
        let st = self.lock();
        let mut active: Vec<&ShardDescriptor> = st.shards.iter().filter(|s| !s.retired).collect();
        active.sort_by(|a, b| a.range.lo.cmp(&b.range.lo));
        let mut expect_lo = Some(String::new());
        for s in &active {
            if expect_lo.as_deref() != Some(s.range.lo.as_str()) {
                return Err(format!("shard {} starts at `{}`, expected {:?}", s.shard_id, s.range.lo, expect_lo));
            }
            if let Some(hi) = &s.range.hi {
                if hi <= &s.range.lo {
                    return Err(format!("shard {} has an empty range", s.shard_id));
                }
            }
            expect_lo = s.range.hi.clone();
        }
        if expect_lo.is_some() {
            return Err("keyspace not covered up to the end".into());
        }
        Ok(())
    }

    pub fn register_node(&self, name: &str, role: NodeRole, shard_id: u32, now_ms: u64) {
        let mut st = self.lock();
        st.nodes.insert(name.to_string(), NodeInfo { role, shard_id, last_heartbeat_ms: now_ms });
        let _ = self.persist(&st);
    }

    pub fn heartbeat(&self, name: &str, now_ms: u64) {
        if let Some(n) = self.lock().nodes.get_mut(name) {
            n.last_heartbeat_ms = now_ms;
        }
    }

    pub fn pending_reservation(&self, shard_id: u32) -> Option<Reservation> {
        self.lock().reservations.get(&shard_id).cloned()
    }

    /// Reserves the next segment id for `shard_id`, or returns the
    /// reservation still pending from an earlier failed attempt.
    pub fn reserve(&self, shard_id: u32, end_offsets: BTreeMap<String, u64>) -> Result<Reservation, ClusterError> {
        let mut st = self.lock();
        if let Some(r) = st.reservations.get(&shard_id) {
            return Ok(r.clone());
        }
        if !st.shards.iter().any(|s| s.shard_id == shard_id && !s.retired) {
            return Err(ClusterError::UnknownShard(shard_id));
        }
        let r = Reservation { shard_id, segment_id: st.next_segment_id, end_offsets };
        st.next_segment_id += 1;
        st.reservations.insert(shard_id, r.clone());
        self.persist(&st)?;
        Ok(r)
    }

    /// Marks a reserved segment as uploaded and committed.
    pub fn complete(&self, shard_id: u32, segment_id: u64) -> Result<(), ClusterError> {
        let mut st = self.lock();
        match st.reservations.get(&shard_id) {
            Some(r) if r.segment_id == segment_id => {}
            _ => return Err(ClusterError::Meta(format!("no reservation {segment_id} for shard {shard_id}"))),
        }
        st.reservations.remove(&shard_id);
        if let Some(s) = st.shards.iter_mut().find(|s| s.shard_id == shard_id) {
            s.last_sealed = Some(segment_id);
        }
        self.persist(&st)
    }

    /// Drops a reservation that ended up covering no documents.
    pub fn cancel(&self, shard_id: u32) -> Result<(), ClusterError> {
        let mut st = self.lock();
        st.reservations.remove(&shard_id);
        self.persist(&st)
    }

    pub fn report_footprint(&self, shard_id: u32, bytes: u64) {
        if let Some(s) = self.lock().shards.iter_mut().find(|s| s.shard_id == shard_id) {
            s.footprint = bytes;
        }
    }

    /// Decides whether `shard_id` must split, given its live keys.
    pub fn plan_split<'a>(
        &self,
        shard_id: u32,
        threshold_bytes: u64,
        live_keys: impl IntoIterator<Item = &'a str>,
    ) -> Result<SplitDecision, ClusterError> {
        let shard = self.shard(shard_id)?;
        if shard.retired {
            return Err(ClusterError::Meta(format!("shard {shard_id} is retired")));
        }
        if shard.footprint <= threshold_bytes {
            return Ok(SplitDecision::NotNeeded { footprint: shard.footprint, threshold: threshold_bytes });
        }
        let mut keys: Vec<&str> = live_keys.into_iter().filter(|k| shard.range.contains(k)).collect();
        keys.sort_unstable();
        keys.dedup();
        if keys.len() < 2 {
            return Ok(SplitDecision::Unsplittable { shard_id, distinct_keys: keys.len() });
        }
        let mid = keys.len() / 2;
        let split_key = keys[mid].to_string();
        let left_share = mid as u64;
        let n = keys.len() as u64;
        Ok(SplitDecision::Split(SplitPlan {
            parent: shard_id,
            left: KeyRange { lo: shard.range.lo.clone(), hi: Some(split_key.clone()) },
            right: KeyRange { lo: split_key.clone(), hi: shard.range.hi.clone() },
            split_key,
            left_footprint: shard.footprint * left_share / n,
            right_footprint: shard.footprint * (n - left_share) / n,
        }))
    }

    /// Registers the two children of a plan and retires the parent.
    pub fn apply_split(&self, plan: &SplitPlan) -> Result<(u32, u32), ClusterError> {
        let mut st = self.lock();
        if st.reservations.contains_key(&plan.parent) {
            return Err(ClusterError::Meta(format!("shard {} has an upload in flight", plan.parent)));
        }
        let parent = st
            .shards
            .iter_mut()
            .find(|s| s.shard_id == plan.parent && !s.retired)
            .ok_or(ClusterError::UnknownShard(plan.parent))?;
        if plan.left.lo != parent.range.lo || plan.right.hi != parent.range.hi || plan.left.hi.as_ref() != Some(&plan.right.lo) {
            return Err(ClusterError::Meta("split plan does not partition the parent".into()));
        }
        parent.retired = true;
        let mut ancestors = parent.ancestors.clone();
        ancestors.push(parent.shard_id);
        let mut ids = [0u32; 2];
        for (i, (range, footprint)) in [(&plan.left, plan.left_footprint), (&plan.right, plan.right_footprint)].into_iter().enumerate() {
            let id = st.next_shard_id;
            st.next_shard_id += 1;
            st.shards.push(ShardDescriptor {
                shard_id: id,
                range: range.clone(),
                write_node: write_node_name(id),
                search_nodes: vec![search_node_name(id)],
                last_sealed: None,
                footprint,
                ancestors: ancestors.clone(),
                retired: false,
            });
            ids[i] = id;
        }
        self.persist(&st)?;
        drop(st);
        self.check_partition().map_err(ClusterError::Meta)?;
        Ok((ids[0], ids[1]))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WriteNodeStats {
    pub segments: u64,
    pub docs: u64,
    pub put_failures: u64,
    pub dedup_puts: u64,
}

/// Consumes documents for one shard and uploads sealed segments.
pub struct WriteNode {
    name: String,
    shard_id: u32,
    range: KeyRange,
    schema: Arc<IndexSchema>,
    log: Arc<UpdateLog>,
    store: InstrumentedStore,
    master: Arc<Master>,
    clock: Arc<dyn Clock>,
    refresh: RefreshConfig,
    topics: Vec<String>,
    group: String,
    cursors: BTreeMap<String, u64>,
    buffer: SegmentBuffer,
    buffer_started_ms: Option<u64>,
    counters: Arc<NodeCounters>,
    stats: WriteNodeStats,
}

impl WriteNode {
    pub fn new(
        shard_id: u32,
        log: Arc<UpdateLog>,
        store: InstrumentedStore,
        master: Arc<Master>,
        clock: Arc<dyn Clock>,
        refresh: RefreshConfig,
    ) -> Result<WriteNode, ClusterError> {
        let shard = master.shard(shard_id)?;
        let schema = log.schema().clone();
        let topics = log.topics_on(UpdatePath::Segment);
        let group = write_group(shard_id);
        let mut cursors = BTreeMap::new();
        for t in &topics {
            log.register_group(&group, t)?;
            cursors.insert(t.clone(), log.committed(&group, t)?);
        }
        let name = write_node_name(shard_id);
        master.register_node(&name, NodeRole::Write, shard_id, clock.now_ms());
        Ok(WriteNode {
            name,
            shard_id,
            range: shard.range,
            buffer: SegmentBuffer::new(schema.clone()),
            schema,
            log,
            store,
            master,
            clock,
            refresh,
            topics,
            group,
            cursors,
            buffer_started_ms: None,
            counters: Arc::new(NodeCounters::default()),
            stats: WriteNodeStats::default(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shard_id(&self) -> u32 {
        self.shard_id
    }

    pub fn counters(&self) -> &Arc<NodeCounters> {
        &self.counters
    }

    pub fn io(&self) -> IoStats {
        self.store.stats()
    }

    pub fn stats(&self) -> WriteNodeStats {
        self.stats
    }

    pub fn buffered_docs(&self) -> u32 {
        self.buffer.doc_count()
    }

    /// Consumes new documents and uploads every segment whose refresh
    /// threshold is reached. Returns the uploaded keys.
    pub fn tick(&mut self) -> Result<Vec<String>, ClusterError> {
        self.run(false)
    }

    /// Like [`WriteNode::tick`] but also seals a partially filled buffer.
    pub fn flush(&mut self) -> Result<Vec<String>, ClusterError> {
        self.run(true)
    }

    fn run(&mut self, force: bool) -> Result<Vec<String>, ClusterError> {
        let _scope = metrics::enter(&self.counters);
        self.master.heartbeat(&self.name, self.clock.now_ms());
        let mut uploaded = Vec::new();
        loop {
            let limit = self.master.pending_reservation(self.shard_id).map(|r| r.end_offsets);
            let full = match self.fill(limit.as_ref()) {
                Ok(full) => full,
                Err(e) => {
                    self.reset()?;
                    return Err(e);
                }
            };
            let due = match &limit {
                Some(l) => l.iter().all(|(t, o)| self.cursors.get(t) == Some(o)),
                None => {
                    let aged = self
                        .buffer_started_ms
                        .is_some_and(|t| self.clock.now_ms().saturating_sub(t) >= self.refresh.max_age_ms);
                    full || aged || (force && self.buffer.doc_count() > 0)
                }
            };
            if !due {
                break;
            }
            if self.buffer.doc_count() == 0 {
                // Reserved range holds no documents for this shard.
                self.commit_cursors()?;
                self.master.cancel(self.shard_id)?;
                continue;
            }
            match self.seal_and_upload() {
                Ok(key) => uploaded.push(key),
                Err(e) => {
                    self.reset()?;
                    return Err(e);
                }
            }
        }
        if self.buffer.doc_count() == 0 && self.master.pending_reservation(self.shard_id).is_none() {
            self.commit_cursors()?;
        }
        Ok(uploaded)
    }

    fn full(&self) -> bool {
        self.buffer.doc_count() >= self.refresh.max_docs || self.buffer.footprint() >= self.refresh.max_bytes
    }

    fn fill(&mut self, limit: Option<&BTreeMap<String, u64>>) -> Result<bool, ClusterError> {
        for topic in self.topics.clone() {
            let end = limit.map_or(u64::MAX, |l| l.get(&topic).copied().unwrap_or(0));
            loop {
                if limit.is_none() && self.full() {
                    return Ok(true);
                }
                let from = self.cursors[&topic];
                if from >= end {
                    break;
                }
                let max = READ_BATCH.min((end - from).min(usize::MAX as u64) as usize);
                let records = self.log.read(&topic, from, max)?;
                if records.is_empty() {
                    break;
                }
                for (offset, rec) in records {
                    if limit.is_none() && self.full() {
                        return Ok(true);
                    }
                    self.cursors.insert(topic.clone(), offset + 1);
                    if let Payload::Doc(doc) = &rec.payload {
                        if self.range.contains(&rec.key) {
                            self.buffer.add(doc, rec.ts_ms)?;
                            self.buffer_started_ms.get_or_insert_with(|| self.clock.now_ms());
                        }
                    }
                }
            }
        }
        Ok(self.full())
    }

    fn seal_and_upload(&mut self) -> Result<String, ClusterError> {
        let res = self.master.reserve(self.shard_id, self.cursors.clone())?;
        let docs = self.buffer.doc_count();
        let bytes = self.buffer.seal(res.segment_id)?;
        let key = segment_key(self.shard_id, res.segment_id);
        match self.store.put(&key, &bytes) {
            Ok(()) => {}
            Err(StoreError::AlreadyExists(_)) => self.stats.dedup_puts += 1,
            Err(e) => {
                self.stats.put_failures += 1;
                return Err(e.into());
            }
        }
        for (t, o) in &res.end_offsets {
            self.log.commit(&self.group, t, *o)?;
        }
        self.master.complete(self.shard_id, res.segment_id)?;
        self.buffer = SegmentBuffer::new(self.schema.clone());
        self.buffer_started_ms = None;
        self.stats.segments += 1;
        self.stats.docs += docs as u64;
        Ok(key)
    }

    fn commit_cursors(&mut self) -> Result<(), ClusterError> {
        for (t, o) in &self.cursors {
            if self.log.committed(&self.group, t)? < *o {
                self.log.commit(&self.group, t, *o)?;
            }
        }
        Ok(())
    }

    /// Drops buffered documents and rewinds to the committed offsets.
    fn reset(&mut self) -> Result<(), ClusterError> {
        self.buffer = SegmentBuffer::new(self.schema.clone());
        self.buffer_started_ms = None;
        for t in &self.topics {
            self.cursors.insert(t.clone(), self.log.committed(&self.group, t)?);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TickReport {
    pub segments: u64,
    pub docs: u64,
    pub inplace: u64,
    pub buffered: u64,
    pub dropped: u64,
    pub alarms: u64,
    pub seq: u64,
}

impl TickReport {
    fn absorb(&mut self, o: TickReport) {
        self.segments += o.segments;
        self.docs += o.docs;
        self.inplace += o.inplace;
        self.buffered += o.buffered;
        self.dropped += o.dropped;
        self.alarms += o.alarms;
        self.seq = self.seq.max(o.seq);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SearchNodeStats {
    pub segments: u64,
    pub docs: u64,
    pub inplace: u64,
    pub dropped_updates: u64,
    pub corrupt_alarms: u64,
    pub pending_updates: u64,
}

/// Read-only handle on a search node, usable from any thread.
#[derive(Clone)]
pub struct SearchReader {
    shard_id: u32,
    cell: Arc<ArcSwap<ReadSnapshot>>,
    counters: Arc<NodeCounters>,
}

impl SearchReader {
    pub fn shard_id(&self) -> u32 {
        self.shard_id
    }

    pub fn snapshot(&self) -> Arc<ReadSnapshot> {
        self.cell.load_full()
    }

    pub fn query(&self, q: &Query, k: usize) -> Vec<Hit> {
        let _scope = metrics::enter(&self.counters);
        execute(&self.cell.load(), q, k)
    }
}

type Overlay = HashMap<FieldId, (Value, u64)>;

/// Serves one shard from memory.
pub struct SearchNode {
    name: String,
    shard_id: u32,
    range: KeyRange,
    log: Arc<UpdateLog>,
    store: InstrumentedStore,
    master: Arc<Master>,
    clock: Arc<dyn Clock>,
    index: MemIndex,
    sources: Vec<(u32, Option<u64>)>,
    last_seen: BTreeMap<u32, String>,
    rt_topics: Vec<String>,
    group: String,
    overlay: HashMap<String, Overlay>,
    unknown_order: VecDeque<String>,
    unknown_entries: usize,
    unknown_cap: usize,
    poll_interval_ms: u64,
    realtime_interval_ms: u64,
    last_poll_ms: Option<u64>,
    last_realtime_ms: Option<u64>,
    counters: Arc<NodeCounters>,
    stats: SearchNodeStats,
}

impl SearchNode {
    /// Starts a search node for `shard_id`. In-place topics are replayed from
    /// the beginning.
    pub fn new(
        shard_id: u32,
        log: Arc<UpdateLog>,
        store: InstrumentedStore,
        master: Arc<Master>,
        clock: Arc<dyn Clock>,
        config: &ClusterConfig,
        policy: MergePolicy,
    ) -> Result<SearchNode, ClusterError> {
        let shard = master.shard(shard_id)?;
        let mut sources = Vec::new();
        for a in &shard.ancestors {
            sources.push((*a, master.shard(*a)?.last_sealed));
        }
        sources.push((shard_id, None));
        let schema = log.schema().clone();
        let rt_topics = log.topics_on(UpdatePath::InPlace);
        let group = search_group(shard_id);
        for t in &rt_topics {
            log.register_group(&group, t)?;
            log.seek(&group, t, 0)?;
        }
        let name = search_node_name(shard_id);
        master.register_node(&name, NodeRole::Search, shard_id, clock.now_ms());
        Ok(SearchNode {
            name,
            shard_id,
            index: MemIndex::with_range(schema, policy, shard.range.clone()),
            range: shard.range,
            log,
            store,
            master,
            clock,
            sources,
            last_seen: BTreeMap::new(),
            rt_topics,
            group,
            overlay: HashMap::new(),
            unknown_order: VecDeque::new(),
            unknown_entries: 0,
            unknown_cap: UNKNOWN_KEY_CAP,
            poll_interval_ms: config.poll.interval_ms,
            realtime_interval_ms: config.realtime.interval_ms,
            last_poll_ms: None,
            last_realtime_ms: None,
            counters: Arc::new(NodeCounters::default()),
            stats: SearchNodeStats::default(),
        })
    }

    /// Lowers the pending-update bound.
    pub fn with_unknown_cap(mut self, cap: usize) -> Self {
        self.unknown_cap = cap;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shard_id(&self) -> u32 {
        self.shard_id
    }

    pub fn counters(&self) -> &Arc<NodeCounters> {
        &self.counters
    }

    pub fn io(&self) -> IoStats {
        self.store.stats()
    }

    pub fn stats(&self) -> SearchNodeStats {
        let mut s = self.stats;
        s.pending_updates = self.unknown_entries as u64;
        s
    }

    pub fn index(&self) -> &MemIndex {
        &self.index
    }

    pub fn snapshot(&self) -> Arc<ReadSnapshot> {
        self.index.snapshot()
    }

    pub fn reader(&self) -> SearchReader {
        SearchReader { shard_id: self.shard_id, cell: self.index.snapshot_cell(), counters: self.counters.clone() }
    }

    pub fn query(&self, q: &Query, k: usize) -> Vec<Hit> {
        self.reader().query(q, k)
    }

    /// Runs whichever of segment polling and in-place consumption is due.
    pub fn run_due(&mut self) -> Result<TickReport, ClusterError> {
        let now = self.clock.now_ms();
        let mut r = TickReport::default();
        if self.last_poll_ms.is_none_or(|t| now.saturating_sub(t) >= self.poll_interval_ms) {
            r.absorb(self.poll_segments()?);
        }
        if self.last_realtime_ms.is_none_or(|t| now.saturating_sub(t) >= self.realtime_interval_ms) {
            r.absorb(self.consume_realtime()?);
        }
        Ok(r)
    }

    /// Polls segments and consumes in-place updates unconditionally.
    pub fn tick(&mut self) -> Result<TickReport, ClusterError> {
        let mut r = self.poll_segments()?;
        r.absorb(self.consume_realtime()?);
        Ok(r)
    }

    /// Lists, downloads and incorporates new segments in id order.
    pub fn poll_segments(&mut self) -> Result<TickReport, ClusterError> {
        let _scope = metrics::enter(&self.counters);
        self.last_poll_ms = Some(self.clock.now_ms());
        self.master.heartbeat(&self.name, self.clock.now_ms());
        let mut pending: Vec<(u64, u32, String)> = Vec::new();
        for &(shard, cutoff) in &self.sources {
            let after = self.last_seen.get(&shard).cloned().unwrap_or_default();
            for key in self.store.list(&segment_prefix(shard), &after)? {
                if let Some((s, id)) = parse_segment_key(&key) {
                    if s == shard && cutoff.is_none_or(|c| id <= c) {
                        pending.push((id, shard, key));
                    }
                }
            }
        }
        pending.sort();
        let mut report = TickReport { seq: self.index.snapshot().seq(), ..TickReport::default() };
        for (id, shard, key) in pending {
            if self.index.last_segment().is_some_and(|last| id <= last) {
                self.last_seen.insert(shard, key);
                continue;
            }
            let view = match self.store.get(&key).map_err(ClusterError::from).and_then(|b| {
                SegmentView::open(&b, self.index.schema().clone()).map_err(ClusterError::from)
            }) {
                Ok(v) => v,
                Err(_) => {
                    // Later segments wait so that ids stay in order.
                    report.alarms += 1;
                    self.stats.corrupt_alarms += 1;
                    break;
                }
            };
            // last occurrence of each key wins within a segment
            let mut last: HashMap<&str, u32> = HashMap::new();
            let keys = view.keys();
            for (i, k) in keys.iter().enumerate() {
                if self.range.contains(k) {
                    last.insert(k, i as u32);
                }
            }
            let fresh: Vec<(u32, bool)> =
                last.iter().map(|(k, &i)| (i, self.index.lookup_key(k).is_none())).collect();
            self.index.incorporate(&view)?;
            for (local, was_unknown) in fresh {
                let key = keys[local as usize];
                let Some(fields) = self.overlay.get(key) else {
                    continue;
                };
                if was_unknown {
                    self.unknown_entries -= fields.len();
                }
                let doc_ts = view.stored()[local as usize].ts_ms;
                for (fid, (value, ts)) in fields.clone() {
                    if ts >= doc_ts {
                        let name = self.index.schema().fields[fid as usize].name.clone();
                        self.index.set_value(&name, key, &value)?;
                    }
                }
            }
            report.segments += 1;
            report.docs += view.doc_count() as u64;
            self.last_seen.insert(shard, key);
        }
        if report.segments > 0 {
            report.seq = self.index.publish().seq();
            self.stats.segments += report.segments;
            self.stats.docs += report.docs;
            self.master.report_footprint(self.shard_id, self.index.footprint() as u64);
        }
        Ok(report)
    }

    /// Applies pending in-place updates straight to the forward arrays.
    pub fn consume_realtime(&mut self) -> Result<TickReport, ClusterError> {
        let _scope = metrics::enter(&self.counters);
        self.last_realtime_ms = Some(self.clock.now_ms());
        let mut report = TickReport { seq: self.index.snapshot().seq(), ..TickReport::default() };
        for topic in self.rt_topics.clone() {
            loop {
                let records = self.log.poll(&topic, &self.group, READ_BATCH)?;
                let Some(&(last, _)) = records.last() else {
                    break;
                };
                for (_, rec) in records {
                    self.apply_update(&rec, &mut report)?;
                }
                self.log.commit(&self.group, &topic, last + 1)?;
            }
        }
        if report.inplace > 0 {
            report.seq = self.index.publish().seq();
        }
        self.stats.inplace += report.inplace;
        self.stats.dropped_updates += report.dropped;
        Ok(report)
    }

    fn apply_update(&mut self, rec: &UpdateRecord, report: &mut TickReport) -> Result<(), ClusterError> {
        let Payload::Field { field, value } = &rec.payload else {
            return Ok(());
        };
        if !self.range.contains(&rec.key) {
            return Ok(());
        }
        let fid = self.index.schema().field_id(field).expect("routed field exists");
        let live = self.index.lookup_key(&rec.key);
        let entry = self.overlay.entry(rec.key.clone());
        let is_new_key = matches!(entry, std::collections::hash_map::Entry::Vacant(_));
        let fields = entry.or_default();
        let is_new_field = fields.insert(fid, (value.clone(), rec.ts_ms)).is_none();
        match live {
            Some((ord, _)) => {
                let doc_ts = self.index.snapshot().stored(ord).map_or(0, |s| s.ts_ms);
                if rec.ts_ms >= doc_ts {
                    self.index.set_value(field, &rec.key, value)?;
                    report.inplace += 1;
                }
            }
            None => {
                if is_new_key {
                    self.unknown_order.push_back(rec.key.clone());
                }
                if is_new_field {
                    self.unknown_entries += 1;
                }
                report.buffered += 1;
                while self.unknown_entries > self.unknown_cap {
                    let Some(oldest) = self.unknown_order.pop_front() else {
                        break;
                    };
                    if self.index.lookup_key(&oldest).is_some() {
                        continue;
                    }
                    if let Some(f) = self.overlay.remove(&oldest) {
                        self.unknown_entries -= f.len();
                        report.dropped += f.len() as u64;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Counters of one node, live or retired.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeReport {
    pub name: String,
    pub role: NodeRole,
    pub shard_id: u32,
    pub io: IoStats,
    pub counters: CounterValues,
}

/// Outcome of ticking every write node once.
#[derive(Debug, Default)]
pub struct WriteRound {
    pub uploaded: Vec<String>,
    pub errors: Vec<(u32, ClusterError)>,
}

/// All node roles of one index composed in a single process.
pub struct Cluster {
    schema: Arc<IndexSchema>,
    config: ClusterConfig,
    policy: MergePolicy,
    master: Arc<Master>,
    store: Arc<dyn ObjectStore>,
    log: Arc<UpdateLog>,
    clock: Arc<dyn Clock>,
    write: BTreeMap<u32, Arc<Mutex<WriteNode>>>,
    search: BTreeMap<u32, Arc<Mutex<SearchNode>>>,
    retired: Vec<NodeReport>,
}

impl Cluster {
    pub fn new(
        config: ClusterConfig,
        master: Arc<Master>,
        store: Arc<dyn ObjectStore>,
        log: Arc<UpdateLog>,
        clock: Arc<dyn Clock>,
    ) -> Result<Cluster, ClusterError> {
        let policy = MergePolicy::Logarithmic { unit: config.merge.unit };
        let mut c = Cluster {
            schema: log.schema().clone(),
            config,
            policy,
            master,
            store,
            log,
            clock,
            write: BTreeMap::new(),
            search: BTreeMap::new(),
            retired: Vec::new(),
        };
        for s in c.master.active_shards() {
            c.start_write_node(s.shard_id)?;
            c.start_search_node(s.shard_id)?;
        }
        Ok(c)
    }

    /// An in-memory cluster with one shard per interval between `boundaries`.
    pub fn in_memory(
        schema: Arc<IndexSchema>,
        config: ClusterConfig,
        clock: Arc<dyn Clock>,
        boundaries: &[&str],
    ) -> Result<Cluster, ClusterError> {
        let master = Arc::new(Master::new(boundaries)?);
        let store: Arc<dyn ObjectStore> = Arc::new(crate::store::MemoryStore::new());
        let log = Arc::new(UpdateLog::in_memory(schema));
        Cluster::new(config, master, store, log, clock)
    }

    pub fn schema(&self) -> &Arc<IndexSchema> {
        &self.schema
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn master(&self) -> &Arc<Master> {
        &self.master
    }

    pub fn log(&self) -> &Arc<UpdateLog> {
        &self.log
    }

    pub fn store(&self) -> &Arc<dyn ObjectStore> {
        &self.store
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    fn start_write_node(&mut self, shard: u32) -> Result<(), ClusterError> {
        let node = WriteNode::new(
            shard,
            self.log.clone(),
            InstrumentedStore::new(self.store.clone()),
            self.master.clone(),
            self.clock.clone(),
            self.config.refresh.clone(),
        )?;
        if let Some(old) = self.write.insert(shard, Arc::new(Mutex::new(node))) {
            self.retired.push(write_report(&old.lock().unwrap()));
        }
        Ok(())
    }

    fn start_search_node(&mut self, shard: u32) -> Result<(), ClusterError> {
        let node = SearchNode::new(
            shard,
            self.log.clone(),
            InstrumentedStore::new(self.store.clone()),
            self.master.clone(),
            self.clock.clone(),
            &self.config,
            self.policy,
        )?;
        if let Some(old) = self.search.insert(shard, Arc::new(Mutex::new(node))) {
            self.retired.push(search_report(&old.lock().unwrap()));
        }
        Ok(())
    }

    /// Replaces a write node with a fresh one, losing its buffer.
    pub fn restart_write_node(&mut self, shard: u32) -> Result<(), ClusterError> {
        self.start_write_node(shard)
    }

    /// Replaces a search node with a fresh one that rebuilds from the store
    /// and replays in-place topics.
    pub fn restart_search_node(&mut self, shard: u32) -> Result<(), ClusterError> {
        self.start_search_node(shard)
    }

    pub fn write_nodes(&self) -> Vec<Arc<Mutex<WriteNode>>> {
        self.write.values().cloned().collect()
    }

    pub fn search_nodes(&self) -> Vec<Arc<Mutex<SearchNode>>> {
        self.search.values().cloned().collect()
    }

    pub fn search_node(&self, shard: u32) -> Result<Arc<Mutex<SearchNode>>, ClusterError> {
        self.search.get(&shard).cloned().ok_or(ClusterError::UnknownShard(shard))
    }

    pub fn readers(&self) -> Vec<SearchReader> {
        self.search.values().map(|n| n.lock().unwrap().reader()).collect()
    }

    /// Publishes a full document on the primary-key topic.
    pub fn publish_doc(&self, doc: Document) -> Result<u64, ClusterError> {
        let key = doc
            .get(&self.schema.primary_key_field)
            .and_then(Value::as_str)
            .ok_or_else(|| SchemaError::Constraint("document has no primary key".into()))?
            .to_string();
        let rec = UpdateRecord::doc(key, doc, self.clock.now_ms());
        Ok(self.log.append(&self.schema.document_topic(), rec)?)
    }

    /// Publishes an in-place field update on the field's own topic.
    pub fn publish_update(&self, key: &str, field: &str, value: Value) -> Result<u64, ClusterError> {
        let (path, topic) = self.schema.route_of(field)?;
        if path != UpdatePath::InPlace {
            return Err(SchemaError::Constraint(format!("`{field}` changes only through full documents")).into());
        }
        let rec = UpdateRecord::field(key, field, value, self.clock.now_ms());
        Ok(self.log.append(&topic, rec)?)
    }

    fn write_round(&self, force: bool) -> WriteRound {
        let mut round = WriteRound::default();
        for (shard, node) in &self.write {
            let mut n = node.lock().unwrap();
            match if force { n.flush() } else { n.tick() } {
                Ok(keys) => round.uploaded.extend(keys),
                Err(e) => round.errors.push((*shard, e)),
            }
        }
        round
    }

    pub fn tick_write(&self) -> WriteRound {
        self.write_round(false)
    }

    pub fn flush_write(&self) -> WriteRound {
        self.write_round(true)
    }

    /// Polls segments and in-place topics on every search node.
    pub fn tick_search(&self) -> Result<TickReport, ClusterError> {
        let mut r = TickReport::default();
        for node in self.search.values() {
            r.absorb(node.lock().unwrap().tick()?);
        }
        Ok(r)
    }

    /// Flushes every write node (retrying failed uploads up to `attempts`
    /// times) and brings every search node up to date.
    pub fn drain(&self, attempts: usize) -> Result<TickReport, ClusterError> {
        for i in 0.. {
            let round = self.flush_write();
            match round.errors.into_iter().next() {
                None => break,
                Some((_, e)) if i + 1 >= attempts => return Err(e),
                Some(_) => {}
            }
        }
        self.tick_search()
    }

    /// Parses and runs a query on every active shard and merges the hits.
    pub fn query(&self, text: &str, k: usize) -> Result<Vec<Hit>, ClusterError> {
        let q = parse_query(text, &self.schema)?;
        Ok(self.query_parsed(&q, k))
    }

    pub fn query_parsed(&self, q: &Query, k: usize) -> Vec<Hit> {
        merge_hits(self.readers().iter().map(|r| r.query(q, k)), k)
    }

    /// Split decision for one shard from its reported footprint and its
    /// search node's live keys.
    pub fn maybe_split(&self, shard: u32) -> Result<SplitDecision, ClusterError> {
        let node = self.search_node(shard)?;
        let n = node.lock().unwrap();
        self.master.plan_split(shard, self.config.split.threshold_bytes, n.index().keys())
    }

    /// Drains the parent's write node, registers the children, hands them
    /// the parent's log offsets and starts their nodes. On failure the
    /// parent keeps serving.
    pub fn execute_split(&mut self, plan: &SplitPlan) -> Result<(u32, u32), ClusterError> {
        let parent = plan.parent;
        let writer = self.write.get(&parent).cloned().ok_or(ClusterError::UnknownShard(parent))?;
        writer.lock().unwrap().flush()?;
        let (l, r) = self.master.apply_split(plan)?;
        for child in [l, r] {
            for t in self.log.topics_on(UpdatePath::Segment) {
                let offset = self.log.committed(&write_group(parent), &t)?;
                self.log.register_group(&write_group(child), &t)?;
                self.log.seek(&write_group(child), &t, offset)?;
            }
            self.start_write_node(child)?;
            self.start_search_node(child)?;
            self.search[&child].lock().unwrap().tick()?;
        }
        if let Some(w) = self.write.remove(&parent) {
            self.retired.push(write_report(&w.lock().unwrap()));
        }
        if let Some(s) = self.search.remove(&parent) {
            self.retired.push(search_report(&s.lock().unwrap()));
        }
        Ok((l, r))
    }

    /// Splits every shard over the threshold once. Returns the executed
    /// plans and the shards that could not split.
    pub fn split_oversized(&mut self) -> Result<(Vec<SplitPlan>, Vec<u32>), ClusterError> {
        let mut done = Vec::new();
        let mut stuck = Vec::new();
        for s in self.master.active_shards() {
            match self.maybe_split(s.shard_id)? {
                SplitDecision::Split(plan) => {
                    self.execute_split(&plan)?;
                    done.push(plan);
                }
                SplitDecision::Unsplittable { shard_id, .. } => stuck.push(shard_id),
                SplitDecision::NotNeeded { .. } => {}
            }
        }
        Ok((done, stuck))
    }

    /// Counters of every node that ever ran in this cluster.
    pub fn node_reports(&self) -> Vec<NodeReport> {
        let mut v = self.retired.clone();
        v.extend(self.write.values().map(|n| write_report(&n.lock().unwrap())));
        v.extend(self.search.values().map(|n| search_report(&n.lock().unwrap())));
        v
    }

    /// Writes the master snapshot next to `path`.
    pub fn save_meta(&self, path: &Path) -> Result<(), ClusterError> {
        fs::write(path, serde_json::to_vec_pretty(&self.master.state())?)?;
        Ok(())
    }
}

fn write_report(n: &WriteNode) -> NodeReport {
    NodeReport {
        name: n.name.clone(),
        role: NodeRole::Write,
        shard_id: n.shard_id,
        io: n.io(),
        counters: n.counters.values(),
    }
}

fn search_report(n: &SearchNode) -> NodeReport {
    NodeReport {
        name: n.name.clone(),
        role: NodeRole::Search,
        shard_id: n.shard_id,
        io: n.io(),
        counters: n.counters.values(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::schema::tests::products;
    use crate::segment::tests::{doc, s};
    use crate::store::{FaultyStore, MemoryStore, PutFault};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn config(max_docs: u32) -> ClusterConfig {
        let mut c = ClusterConfig::default();
        c.refresh.max_docs = max_docs;
        c.merge.unit = 4;
        c
    }

    fn product(key: &str, title: &str, price: f64) -> Document {
        doc(&[("id", s(key)), ("title", s(title)), ("price", Value::Float(price))])
    }

    fn keys(hits: &[Hit]) -> Vec<String> {
        hits.iter().map(|h| h.key.clone()).collect()
    }

    #[test]
    fn routing_is_half_open() {
        let m = Master::new(&["m"]).unwrap();
        assert_eq!(m.route("apple").unwrap(), 0);
        assert_eq!(m.route("m").unwrap(), 1);
        assert_eq!(m.route("zzz").unwrap(), 1);
        assert!(m.route("").is_err());
        m.check_partition().unwrap();
    }

    #[test]
    fn routing_matches_linear_scan() {
        let m = Master::new(&["d", "k", "q", "t"]).unwrap();
        let shards = m.active_shards();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let len = rng.gen_range(1..6);
            let key: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let owners: Vec<u32> = shards.iter().filter(|s| s.range.contains(&key)).map(|s| s.shard_id).collect();
            assert_eq!(owners.len(), 1);
            assert_eq!(m.route(&key).unwrap(), owners[0]);
        }
    }

    #[test]
    fn reservations_are_reused_until_complete() {
        let m = Master::new(&[]).unwrap();
        let a = m.reserve(0, BTreeMap::from([("t".to_string(), 5)])).unwrap();
        let b = m.reserve(0, BTreeMap::new()).unwrap();
        assert_eq!(a, b);
        m.complete(0, a.segment_id).unwrap();
        let c = m.reserve(0, BTreeMap::new()).unwrap();
        assert_eq!(c.segment_id, a.segment_id + 1);
        assert!(m.complete(0, 99).is_err());
        assert!(m.reserve(7, BTreeMap::new()).is_err());
    }

    #[test]
    fn master_snapshot_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.json");
        {
            let m = Master::open(&path, &["m"]).unwrap();
            let r = m.reserve(1, BTreeMap::new()).unwrap();
            m.complete(1, r.segment_id).unwrap();
        }
        let m = Master::open(&path, &[]).unwrap();
        assert_eq!(m.active_shards().len(), 2);
        assert_eq!(m.shard(1).unwrap().last_sealed, Some(1));
        assert_eq!(m.reserve(0, BTreeMap::new()).unwrap().segment_id, 2);
    }

    #[test]
    fn write_node_seals_at_exact_threshold() {
        let clock = Arc::new(ManualClock::new(1000));
        let c = Cluster::in_memory(Arc::new(products()), config(10), clock.clone(), &[]).unwrap();
        for i in 0..10 {
            c.publish_doc(product(&format!("p{i}"), "shoe", 1.0)).unwrap();
        }
        let round = c.tick_write();
        assert!(round.errors.is_empty());
        assert_eq!(round.uploaded, vec![segment_key(0, 1)]);
        let view = SegmentView::open(&c.store().get(&round.uploaded[0]).unwrap(), c.schema().clone()).unwrap();
        assert_eq!(view.doc_count(), 10);
        assert!(c.tick_write().uploaded.is_empty());
        assert_eq!(c.log().lag(&c.schema().document_topic(), &write_group(0)).unwrap(), 0);
    }

    #[test]
    fn write_node_seals_on_age() {
        let clock = Arc::new(ManualClock::new(1000));
        let c = Cluster::in_memory(Arc::new(products()), config(10), clock.clone(), &[]).unwrap();
        for i in 0..5 {
            c.publish_doc(product(&format!("p{i}"), "shoe", 1.0)).unwrap();
        }
        assert!(c.tick_write().uploaded.is_empty());
        assert_eq!(c.log().lag(&c.schema().document_topic(), &write_group(0)).unwrap(), 5);
        clock.advance(5000);
        let round = c.tick_write();
        assert_eq!(round.uploaded.len(), 1);
        let view = SegmentView::open(&c.store().get(&round.uploaded[0]).unwrap(), c.schema().clone()).unwrap();
        assert_eq!(view.doc_count(), 5);
    }

    #[test]
    fn failed_upload_is_retried_with_the_same_id() {
        let clock = Arc::new(ManualClock::new(1000));
        let schema = Arc::new(products());
        let faults = Arc::new(Mutex::new(vec![Some(PutFault::AfterWrite), Some(PutFault::BeforeWrite)]));
        let f = faults.clone();
        let store: Arc<dyn ObjectStore> =
            Arc::new(FaultyStore::new(Arc::new(MemoryStore::new()), move |_| f.lock().unwrap().pop().flatten()));
        let master = Arc::new(Master::new(&[]).unwrap());
        let log = Arc::new(UpdateLog::in_memory(schema.clone()));
        let c = Cluster::new(config(3), master, store, log, clock.clone()).unwrap();
        for i in 0..3 {
            c.publish_doc(product(&format!("p{i}"), "shoe", 1.0)).unwrap();
        }
        let r1 = c.tick_write();
        assert!(r1.uploaded.is_empty() && r1.errors.len() == 1);
        assert_eq!(c.log().committed(&write_group(0), &schema.document_topic()).unwrap(), 0);
        // the second attempt writes the object but reports failure
        let r2 = c.tick_write();
        assert!(r2.uploaded.is_empty() && r2.errors.len() == 1);
        let r3 = c.tick_write();
        assert_eq!(r3.uploaded, vec![segment_key(0, 1)]);
        let w = c.write_nodes()[0].clone();
        assert_eq!(w.lock().unwrap().stats().dedup_puts, 1);
        assert_eq!(c.store().list("shards/", "").unwrap().len(), 1);
        c.tick_search().unwrap();
        assert_eq!(c.query("title:shoe", 10).unwrap().len(), 3);
    }

    #[test]
    fn search_tick_reports_and_sequence() {
        let clock = Arc::new(ManualClock::new(1000));
        let c = Cluster::in_memory(Arc::new(products()), config(2), clock.clone(), &[]).unwrap();
        let empty = c.tick_search().unwrap();
        assert_eq!((empty.segments, empty.inplace), (0, 0));
        let seq0 = c.readers()[0].snapshot().seq();
        assert_eq!(c.tick_search().unwrap().seq, seq0);

        c.publish_doc(product("p1", "red shoe", 50.0)).unwrap();
        c.publish_doc(product("p2", "blue shoe", 60.0)).unwrap();
        assert_eq!(c.tick_write().uploaded.len(), 1);
        clock.advance(1);
        for p in [5.0, 6.0, 7.0] {
            c.publish_update("p1", "price", Value::Float(p)).unwrap();
        }
        let r = c.tick_search().unwrap();
        assert_eq!((r.segments, r.inplace), (1, 3));
        assert!(r.seq > seq0);
        assert_eq!(keys(&c.query("price:[0 TO 10]", 10).unwrap()), vec!["p1"]);
        assert_eq!(c.readers()[0].snapshot().field_value(3, 0), Some(Value::Float(7.0)));
    }

    #[test]
    fn update_before_create_is_buffered() {
        let clock = Arc::new(ManualClock::new(1000));
        let c = Cluster::in_memory(Arc::new(products()), config(1), clock.clone(), &[]).unwrap();
        c.publish_doc(product("p1", "shoe", 50.0)).unwrap();
        clock.advance(10);
        c.publish_update("p1", "price", Value::Float(9.0)).unwrap();
        // search node sees the update before the segment exists
        let r = c.tick_search().unwrap();
        assert_eq!((r.inplace, r.buffered), (0, 1));
        c.tick_write();
        c.tick_search().unwrap();
        assert_eq!(keys(&c.query("price:[0 TO 10]", 10).unwrap()), vec!["p1"]);
        // a newer document version overrides the older update
        clock.advance(10);
        c.publish_doc(product("p1", "shoe", 70.0)).unwrap();
        c.tick_write();
        c.tick_search().unwrap();
        assert!(c.query("price:[0 TO 10]", 10).unwrap().is_empty());
        assert_eq!(keys(&c.query("price:[70 TO 70]", 10).unwrap()), vec!["p1"]);
    }

    #[test]
    fn unknown_key_buffer_is_bounded() {
        let clock = Arc::new(ManualClock::new(1000));
        let c = Cluster::in_memory(Arc::new(products()), config(1), clock.clone(), &[]).unwrap();
        let node = c.search_node(0).unwrap();
        let mut n = node.lock().unwrap();
        let taken = std::mem::replace(
            &mut *n,
            SearchNode::new(0, c.log().clone(), InstrumentedStore::new(c.store().clone()), c.master().clone(), clock.clone(), c.config(), MergePolicy::default())
                .unwrap(),
        );
        *n = taken.with_unknown_cap(3);
        drop(n);
        for i in 0..5 {
            c.publish_update(&format!("k{i}"), "price", Value::Float(1.0)).unwrap();
        }
        let r = c.tick_search().unwrap();
        assert_eq!((r.buffered, r.dropped), (5, 2));
        assert_eq!(node.lock().unwrap().stats().pending_updates, 3);
    }

    #[test]
    fn corrupt_segment_raises_alarm_and_blocks_later_ones() {
        let clock = Arc::new(ManualClock::new(1000));
        let c = Cluster::in_memory(Arc::new(products()), config(1), clock.clone(), &[]).unwrap();
        c.store().put(&segment_key(0, 1), b"SSEG garbage").unwrap();
        c.master().reserve(0, BTreeMap::new()).unwrap();
        c.master().complete(0, 1).unwrap();
        c.publish_doc(product("p1", "shoe", 1.0)).unwrap();
        c.tick_write();
        let r = c.tick_search().unwrap();
        assert_eq!((r.alarms, r.segments), (1, 0));
        assert!(c.query("title:shoe", 10).unwrap().is_empty());
    }

    #[test]
    fn roles_are_isolated() {
        let clock = Arc::new(ManualClock::new(1000));
        let c = Cluster::in_memory(Arc::new(products()), config(4), clock.clone(), &["m"]).unwrap();
        for i in 0..40 {
            c.publish_doc(product(&format!("{}{i}", ["a", "x"][i % 2]), "shoe", i as f64)).unwrap();
            if i % 7 == 0 {
                c.tick_write();
                c.tick_search().unwrap();
                c.query("title:shoe", 5).unwrap();
            }
        }
        c.drain(1).unwrap();
        assert_eq!(c.query("title:shoe", 100).unwrap().len(), 40);
        for r in c.node_reports() {
            match r.role {
                NodeRole::Search => {
                    assert_eq!(r.io.puts, 0, "{}", r.name);
                    assert_eq!(r.counters.segment_writer_calls, 0);
                    assert!(r.counters.query_executions > 0);
                }
                NodeRole::Write => {
                    assert_eq!(r.counters.query_executions, 0, "{}", r.name);
                    assert_eq!(r.io.gets, 0);
                    assert!(r.io.puts > 0);
                }
            }
        }
    }

    #[test]
    fn split_partitions_and_preserves_results() {
        let clock = Arc::new(ManualClock::new(1000));
        let mut cfg = config(8);
        cfg.split.threshold_bytes = 1;
        let mut c = Cluster::in_memory(Arc::new(products()), cfg, clock.clone(), &[]).unwrap();
        let words = ["red", "blue", "shoe", "boot"];
        for (i, ch) in ('a'..='z').enumerate() {
            let title = format!("{} {}", words[i % 4], words[(i / 4) % 4]);
            c.publish_doc(product(&format!("{ch}key"), &title, i as f64)).unwrap();
        }
        c.drain(1).unwrap();
        let queries = ["title:red", "title:shoe OR title:boot", "price:[3 TO 17]", "title:blue AND price:[0 TO 12]"];
        let before: Vec<Vec<Hit>> = queries.iter().map(|q| c.query(q, 100).unwrap()).collect();

        let plan = match c.maybe_split(0).unwrap() {
            SplitDecision::Split(p) => p,
            other => panic!("{other:?}"),
        };
        assert_eq!(plan.split_key, "nkey");
        assert!(plan.left_footprint + plan.right_footprint <= c.master().shard(0).unwrap().footprint);
        let (l, r) = c.execute_split(&plan).unwrap();
        c.master().check_partition().unwrap();
        assert_eq!(c.master().route("akey").unwrap(), l);
        assert_eq!(c.master().route("nkey").unwrap(), r);
        for (q, want) in queries.iter().zip(&before) {
            let mut got = c.query(q, 100).unwrap();
            let mut want = want.clone();
            got.sort_by(|a, b| a.key.cmp(&b.key));
            want.sort_by(|a, b| a.key.cmp(&b.key));
            assert_eq!(keys(&got), keys(&want), "{q}");
        }
        // left child answers only for its own range
        let left = c.search_node(l).unwrap();
        let hits = left.lock().unwrap().query(&parse_query("title:red", c.schema()).unwrap(), 100);
        assert!(hits.iter().all(|h| h.key.as_str() < "nkey"));

        // new writes route to the children
        c.publish_doc(product("bkey", "green", 1.0)).unwrap();
        c.publish_doc(product("zzz", "green", 1.0)).unwrap();
        c.drain(1).unwrap();
        let mut green = keys(&c.query("title:green", 10).unwrap());
        green.sort();
        assert_eq!(green, vec!["bkey", "zzz"]);
        assert_eq!(c.query("title:red", 100).unwrap().len(), before[0].len() - 1);
    }

    #[test]
    fn unsplittable_and_not_needed() {
        let clock = Arc::new(ManualClock::new(1000));
        let mut cfg = config(8);
        cfg.split.threshold_bytes = 1;
        let c = Cluster::in_memory(Arc::new(products()), cfg, clock.clone(), &[]).unwrap();
        c.publish_doc(product("only", "x", 1.0)).unwrap();
        c.publish_doc(product("only", "y", 1.0)).unwrap();
        c.drain(1).unwrap();
        assert_eq!(c.maybe_split(0).unwrap(), SplitDecision::Unsplittable { shard_id: 0, distinct_keys: 1 });
        let footprint = c.master().shard(0).unwrap().footprint;
        assert_eq!(
            c.master().plan_split(0, footprint * 10 / 9, ["a", "b"]).unwrap(),
            SplitDecision::NotNeeded { footprint, threshold: footprint * 10 / 9 }
        );
    }

    #[test]
    fn crash_replay_keeps_latest_versions() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clock = Arc::new(ManualClock::new(1000));
            let schema = Arc::new(products());
            let fail = Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed + 100)));
            let f = fail.clone();
            let store: Arc<dyn ObjectStore> = Arc::new(FaultyStore::new(Arc::new(MemoryStore::new()), move |_| {
                let mut r = f.lock().unwrap();
                match r.gen_range(0..10) {
                    0 => Some(PutFault::BeforeWrite),
                    1 => Some(PutFault::AfterWrite),
                    _ => None,
                }
            }));
            let master = Arc::new(Master::new(&["k5"]).unwrap());
            let log = Arc::new(UpdateLog::in_memory(schema.clone()));
            let mut c = Cluster::new(config(5), master, store, log, clock.clone()).unwrap();
            let mut latest: BTreeMap<String, (String, f64)> = BTreeMap::new();
            for step in 0..300 {
                clock.advance(rng.gen_range(1..20));
                let key = format!("k{}", rng.gen_range(0..30));
                match rng.gen_range(0..10) {
                    0..=4 => {
                        let title = ["red", "blue", "green"][rng.gen_range(0..3)].to_string();
                        let price = rng.gen_range(0..100) as f64;
                        c.publish_doc(product(&key, &title, price)).unwrap();
                        latest.insert(key, (title, price));
                    }
                    5..=6 if latest.contains_key(&key) => {
                        let price = rng.gen_range(0..100) as f64;
                        c.publish_update(&key, "price", Value::Float(price)).unwrap();
                        latest.get_mut(&key).unwrap().1 = price;
                    }
                    7 => {
                        c.tick_write();
                    }
                    8 => {
                        c.tick_search().unwrap();
                    }
                    _ => {
                        let shard = rng.gen_range(0..2);
                        if step % 2 == 0 {
                            c.restart_write_node(shard).unwrap();
                        } else {
                            c.restart_search_node(shard).unwrap();
                        }
                    }
                }
            }
            c.drain(50).unwrap();
            for (key, (title, price)) in &latest {
                let hits = c.query(&format!("id:{key}"), 10).unwrap();
                assert_eq!(hits.len(), 1, "seed {seed} key {key}");
                let shard = c.master().route(key).unwrap();
                let snap = c.search_node(shard).unwrap().lock().unwrap().snapshot();
                assert_eq!(snap.stored(hits[0].ordinal).unwrap().doc["title"], s(title));
                assert_eq!(snap.field_value(3, hits[0].ordinal), Some(Value::Float(*price)), "seed {seed} key {key}");
            }
            let all: BTreeSet<String> = c.query("title:red OR title:blue OR title:green", 1000).unwrap().into_iter().map(|h| h.key).collect();
            assert_eq!(all, latest.keys().cloned().collect());
        }
    }
}
