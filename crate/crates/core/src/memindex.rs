//! The search node's in-memory index.
//!
//! Downloaded segments become sub-indexes with a fresh ordinal base.
//! Sub-indexes are merged in memory according to a [`MergePolicy`], older
//! versions of a primary key are tombstoned, and every change is published
//! as an immutable [`ReadSnapshot`] through an atomic pointer swap.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use arc_swap::ArcSwap;
use im::OrdMap;
use thiserror::Error;

use crate::codec::DocIdSet;
use crate::forward::{ForwardError, ForwardStore};
use crate::schema::{FieldId, FieldKind, IndexSchema, SchemaError, Value};
use crate::segment::{PostingList, SegmentView, StoredDoc};

/// Default level unit, in documents.
pub const DEFAULT_UNIT: u32 = 1024;

/// Fixed accounting overhead of an empty index.
pub const BASE_FOOTPRINT: usize = 4096;

#[derive(Debug, Error)]
pub enum MemIndexError {
    #[error("segment {segment_id} is not newer than last incorporated segment {last}")]
    OutOfOrder { segment_id: u64, last: u64 },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("field `{0}` is not an indexed field")]
    NonIndexedField(String),
    #[error(transparent)]
    Forward(#[from] ForwardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergePolicy {
    /// Rebuild a single sub-index on every incorporation.
    Immediate,
    /// Never merge.
    NoMerge,
    /// Merge two sub-indexes whenever they reach the same level.
    Logarithmic { unit: u32 },
}

impl Default for MergePolicy {
    fn default() -> Self {
        MergePolicy::Logarithmic { unit: DEFAULT_UNIT }
    }
}

/// Level of a sub-index holding `docs` documents: `floor(log2(docs / unit))`,
/// and 0 below two units.
pub fn level_for(docs: u64, unit: u32) -> u32 {
    let units = docs / unit.max(1) as u64;
    if units < 2 {
        0
    } else {
        63 - units.leading_zeros()
    }
}

/// Merge actions for the given sub-index sizes (oldest first) under the
/// binary-counter discipline. Each action names two indices into the current
/// list; the merged result replaces the first and the second is removed.
pub fn merge_plan(sizes: &[u64], unit: u32) -> Vec<(usize, usize)> {
    let mut sizes = sizes.to_vec();
    let mut plan = Vec::new();
    while let Some((i, j)) = next_pair(&sizes, unit) {
        sizes[i] += sizes[j];
        sizes.remove(j);
        plan.push((i, j));
    }
    plan
}

fn next_pair(sizes: &[u64], unit: u32) -> Option<(usize, usize)> {
    let levels: Vec<u32> = sizes.iter().map(|&s| level_for(s, unit)).collect();
    let mut best: Option<(u32, usize, usize)> = None;
    for j in 0..levels.len() {
        for i in 0..j {
            if levels[i] == levels[j] && best.is_none_or(|(l, _, _)| levels[i] < l) {
                best = Some((levels[i], i, j));
            }
        }
    }
    best.map(|(_, i, j)| (i, j))
}

/// Half-open range `[lo, hi)` over primary-key bytes; `hi = None` is unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct KeyRange {
    pub lo: String,
    pub hi: Option<String>,
}

impl KeyRange {
    pub fn full() -> Self {
        KeyRange::default()
    }

    pub fn contains(&self, key: &str) -> bool {
        key >= self.lo.as_str() && self.hi.as_deref().is_none_or(|h| key < h)
    }
}

/// A group of merged segments with a combined postings map.
#[derive(Debug, Clone)]
pub struct SubIndex {
    level: u32,
    doc_count: u64,
    postings: BTreeMap<(FieldId, String), PostingList>,
    /// `(segment_id, ordinal base, doc_count)` of each constituent segment.
    bases: Vec<(u64, u32, u32)>,
    footprint: usize,
}

fn postings_footprint(term: &str, p: &PostingList) -> usize {
    term.len() + 16 + p.docs.serialized_len() + p.tfs.len() * 4 + p.positions.len() * 4
}

impl SubIndex {
    /// Builds a sub-index from a segment, shifting local ids by `base`.
    pub fn from_view(view: &SegmentView, base: u32, unit: u32) -> SubIndex {
        let postings = view
            .terms()
            .iter()
            .map(|t| {
                let docs = DocIdSet::from_sorted_iter(t.postings.docs.iter().map(|d| d + base));
                let p = PostingList { docs, tfs: t.postings.tfs.clone(), positions: t.postings.positions.clone() };
                ((t.field, t.term.clone()), p)
            })
            .collect();
        SubIndex::new(postings, vec![(view.segment_id(), base, view.doc_count())], unit)
    }

    pub fn new(postings: BTreeMap<(FieldId, String), PostingList>, bases: Vec<(u64, u32, u32)>, unit: u32) -> SubIndex {
        let doc_count = bases.iter().map(|b| b.2 as u64).sum();
        let footprint = postings.iter().map(|((_, t), p)| postings_footprint(t, p)).sum::<usize>() + bases.len() * 16;
        SubIndex { level: level_for(doc_count, unit), doc_count, postings, bases, footprint }
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn doc_count(&self) -> u64 {
        self.doc_count
    }

    pub fn bases(&self) -> &[(u64, u32, u32)] {
        &self.bases
    }

    pub fn footprint(&self) -> usize {
        self.footprint
    }

    pub fn lookup(&self, field: FieldId, term: &str) -> Option<&PostingList> {
        self.postings.get(&(field, term.to_string()))
    }

    pub fn terms(&self) -> impl Iterator<Item = (&(FieldId, String), &PostingList)> {
        self.postings.iter()
    }
}

/// Heap-merges the sorted postings maps of two sub-indexes. Ordinals are
/// kept as they are.
pub fn merge_subindexes(a: &SubIndex, b: &SubIndex, unit: u32) -> SubIndex {
    let mut ia = a.postings.iter().peekable();
    let mut ib = b.postings.iter().peekable();
    let mut merged = Vec::with_capacity(a.postings.len().max(b.postings.len()));
    loop {
        let next = match (ia.peek(), ib.peek()) {
            (Some((ka, _)), Some((kb, _))) => match ka.cmp(kb) {
                std::cmp::Ordering::Less => ia.next().map(|(k, p)| (k.clone(), p.clone())),
                std::cmp::Ordering::Greater => ib.next().map(|(k, p)| (k.clone(), p.clone())),
                std::cmp::Ordering::Equal => {
                    let (k, pa) = ia.next().expect("peeked");
                    let (_, pb) = ib.next().expect("peeked");
                    Some((k.clone(), PostingList::merge_disjoint(pa, pb)))
                }
            },
            (Some(_), None) => ia.next().map(|(k, p)| (k.clone(), p.clone())),
            (None, Some(_)) => ib.next().map(|(k, p)| (k.clone(), p.clone())),
            (None, None) => break,
        };
        merged.extend(next);
    }
    let mut bases = a.bases.clone();
    bases.extend_from_slice(&b.bases);
    bases.sort_unstable_by_key(|b| b.1);
    SubIndex::new(merged.into_iter().collect(), bases, unit)
}

/// Per-segment document table: keys, field lengths, stored documents.
#[derive(Debug)]
pub struct SegmentDocs {
    pub segment_id: u64,
    pub base: u32,
    pub keys: Vec<Arc<str>>,
    lengths: HashMap<FieldId, Vec<u32>>,
    pub stored: Vec<StoredDoc>,
}

impl SegmentDocs {
    fn bytes(&self) -> usize {
        self.keys.iter().map(|k| k.len() + 16).sum::<usize>()
            + self.lengths.values().map(|v| v.len() * 4).sum::<usize>()
            + self.stored.len() * 48
    }
}

/// Immutable view of the index at one point in time.
#[derive(Debug, Clone)]
pub struct ReadSnapshot {
    seq: u64,
    schema: Arc<IndexSchema>,
    subs: Vec<Arc<SubIndex>>,
    tombstones: Arc<DocIdSet>,
    live: Arc<DocIdSet>,
    forward: Arc<ForwardStore>,
    docs: OrdMap<u32, Arc<SegmentDocs>>,
    len_sums: Arc<HashMap<FieldId, u64>>,
}

impl ReadSnapshot {
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn schema(&self) -> &Arc<IndexSchema> {
        &self.schema
    }

    pub fn sub_indexes(&self) -> &[Arc<SubIndex>] {
        &self.subs
    }

    /// Ordinals of superseded versions.
    pub fn tombstones(&self) -> &DocIdSet {
        &self.tombstones
    }

    /// Ordinals that are neither tombstoned nor outside the key range.
    pub fn live(&self) -> &DocIdSet {
        &self.live
    }

    pub fn live_count(&self) -> u64 {
        self.live.len()
    }

    pub fn forward(&self) -> &ForwardStore {
        &self.forward
    }

    fn indexed_field(&self, field: &str) -> Result<FieldId, MemIndexError> {
        self.schema.field(field)?;
        let fid = self.schema.field_id(field).expect("field exists");
        if !self.schema.is_indexed(fid) {
            return Err(MemIndexError::NonIndexedField(field.to_string()));
        }
        Ok(fid)
    }

    /// Union of the term's postings over all sub-indexes, live docs only.
    pub fn postings(&self, field: &str, term: &str) -> Result<DocIdSet, MemIndexError> {
        let fid = self.indexed_field(field)?;
        Ok(self.postings_by_id(fid, term))
    }

    pub fn postings_by_id(&self, field: FieldId, term: &str) -> DocIdSet {
        let mut out = DocIdSet::new();
        for s in &self.subs {
            if let Some(p) = s.lookup(field, term) {
                out = out.union(&p.docs);
            }
        }
        out.intersect(&self.live)
    }

    /// `(ordinal, tf)` pairs of live docs containing the term, by ordinal.
    pub fn term_frequencies(&self, field: FieldId, term: &str) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for s in &self.subs {
            if let Some(p) = s.lookup(field, term) {
                out.extend(p.entries().filter(|(d, _, _)| self.live.contains(*d)).map(|(d, tf, _)| (d, tf)));
            }
        }
        out.sort_unstable();
        out
    }

    fn segment_of(&self, ordinal: u32) -> Option<&Arc<SegmentDocs>> {
        let (_, seg) = self.docs.range(..=ordinal).next_back()?;
        (ordinal < seg.base + seg.keys.len() as u32).then_some(seg)
    }

    pub fn key_of(&self, ordinal: u32) -> Option<&str> {
        let seg = self.segment_of(ordinal)?;
        Some(&seg.keys[(ordinal - seg.base) as usize])
    }

    pub fn stored(&self, ordinal: u32) -> Option<&StoredDoc> {
        let seg = self.segment_of(ordinal)?;
        seg.stored.get((ordinal - seg.base) as usize)
    }

    /// Token count of an indexed field for one document. Keyword fields
    /// count as one token.
    pub fn field_len(&self, field: FieldId, ordinal: u32) -> u32 {
        let Some(seg) = self.segment_of(ordinal) else {
            return 0;
        };
        match seg.lengths.get(&field) {
            Some(l) => l[(ordinal - seg.base) as usize],
            None => 1,
        }
    }

    /// Average token count of a field over live docs.
    pub fn avg_len(&self, field: FieldId) -> f64 {
        let n = self.live.len();
        if n == 0 {
            return 0.0;
        }
        match self.len_sums.get(&field) {
            Some(&sum) => sum as f64 / n as f64,
            None => 1.0,
        }
    }

    /// Live ordinals in increasing order.
    pub fn live_ordinals(&self) -> impl Iterator<Item = u32> + '_ {
        self.live.iter()
    }

    /// Current value of an in-place field.
    pub fn field_value(&self, field: FieldId, ordinal: u32) -> Option<Value> {
        self.forward.get_by_id(field, ordinal)
    }
}

/// Counters describing merge activity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct MergeStats {
    pub merges: u64,
    /// Documents copied into merged or rebuilt sub-indexes.
    pub doc_copies: u64,
    pub incorporated: u64,
    pub max_sub_indexes: usize,
}

/// The writable index owned by one search node.
pub struct MemIndex {
    schema: Arc<IndexSchema>,
    policy: MergePolicy,
    range: KeyRange,
    subs: Vec<Arc<SubIndex>>,
    tombstones: Arc<DocIdSet>,
    live: Arc<DocIdSet>,
    forward: ForwardStore,
    docs: OrdMap<u32, Arc<SegmentDocs>>,
    keymap: HashMap<Arc<str>, (u32, u64)>,
    len_sums: HashMap<FieldId, u64>,
    next_ordinal: u32,
    last_segment: Option<u64>,
    stats: MergeStats,
    seq: u64,
    published: Arc<ArcSwap<ReadSnapshot>>,
}

impl MemIndex {
    pub fn new(schema: Arc<IndexSchema>, policy: MergePolicy) -> Self {
        MemIndex::with_range(schema, policy, KeyRange::full())
    }

    /// An index that only exposes keys inside `range`.
    pub fn with_range(schema: Arc<IndexSchema>, policy: MergePolicy, range: KeyRange) -> Self {
        let forward = ForwardStore::new(&schema);
        let len_sums: HashMap<FieldId, u64> = schema
            .fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FieldKind::Text)
            .map(|(i, _)| (i as FieldId, 0))
            .collect();
        let snapshot = ReadSnapshot {
            seq: 0,
            schema: schema.clone(),
            subs: Vec::new(),
            tombstones: Arc::default(),
            live: Arc::default(),
            forward: Arc::new(forward.clone()),
            docs: OrdMap::new(),
            len_sums: Arc::new(len_sums.clone()),
        };
        MemIndex {
            schema,
            policy,
            range,
            subs: Vec::new(),
            tombstones: Arc::default(),
            live: Arc::default(),
            forward,
            docs: OrdMap::new(),
            keymap: HashMap::new(),
            len_sums,
            next_ordinal: 0,
            last_segment: None,
            stats: MergeStats::default(),
            seq: 0,
            published: Arc::new(ArcSwap::from_pointee(snapshot)),
        }
    }

    pub fn schema(&self) -> &Arc<IndexSchema> {
        &self.schema
    }

    pub fn range(&self) -> &KeyRange {
        &self.range
    }

    pub fn policy(&self) -> MergePolicy {
        self.policy
    }

    pub fn stats(&self) -> MergeStats {
        self.stats
    }

    pub fn last_segment(&self) -> Option<u64> {
        self.last_segment
    }

    pub fn sub_index_count(&self) -> usize {
        self.subs.len()
    }

    pub fn levels(&self) -> Vec<u32> {
        self.subs.iter().map(|s| s.level).collect()
    }

    /// Total ordinals handed out so far.
    pub fn ordinal_space(&self) -> u32 {
        self.next_ordinal
    }

    /// Live ordinal and segment id of the latest version of `key`.
    pub fn lookup_key(&self, key: &str) -> Option<(u32, u64)> {
        self.keymap.get(key).copied()
    }

    /// Live primary keys.
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keymap.keys().map(|k| &**k)
    }

    pub fn live_count(&self) -> u64 {
        self.live.len()
    }

    /// Adds a segment as a new sub-index, tombstones older versions of its
    /// keys, runs the merge policy and publishes a new snapshot.
    pub fn incorporate(&mut self, view: &SegmentView) -> Result<Arc<ReadSnapshot>, MemIndexError> {
        if let Some(last) = self.last_segment {
            if view.segment_id() <= last {
                return Err(MemIndexError::OutOfOrder { segment_id: view.segment_id(), last });
            }
        }
        crate::metrics::record(|c| &c.incorporations);
        let base = self.next_ordinal;
        self.forward.init_from_segment(view, base)?;
        self.last_segment = Some(view.segment_id());
        self.next_ordinal += view.doc_count();

        let keys: Vec<Arc<str>> = view.keys().into_iter().map(Arc::from).collect();
        let lengths: HashMap<FieldId, Vec<u32>> =
            self.len_sums.keys().filter_map(|&f| view.field_lengths(f).map(|l| (f, l.to_vec()))).collect();
        let tombstones = Arc::make_mut(&mut self.tombstones);
        let live = Arc::make_mut(&mut self.live);
        for (local, key) in keys.iter().enumerate() {
            if !self.range.contains(key) {
                continue;
            }
            let ordinal = base + local as u32;
            if let Some((old, _)) = self.keymap.insert(key.clone(), (ordinal, view.segment_id())) {
                tombstones.add(old);
                live.remove(old);
                let old_seg = if old >= base { None } else { self.docs.range(..=old).next_back().map(|(_, s)| s.clone()) };
                let old_lengths = old_seg.as_ref().map(|s| (s, old - s.base));
                for (f, sum) in &mut self.len_sums {
                    let prev = match old_lengths {
                        Some((s, i)) => s.lengths.get(f).map_or(0, |l| l[i as usize]),
                        None => lengths.get(f).map_or(0, |l| l[(old - base) as usize]),
                    };
                    *sum -= prev as u64;
                }
            }
            live.add(ordinal);
            for (f, sum) in &mut self.len_sums {
                *sum += lengths.get(f).map_or(0, |l| l[local] as u64);
            }
        }
        let seg = SegmentDocs {
            segment_id: view.segment_id(),
            base,
            keys,
            lengths,
            stored: view.stored().to_vec(),
        };
        self.docs.insert(base, Arc::new(seg));

        let unit = match self.policy {
            MergePolicy::Logarithmic { unit } => unit,
            _ => DEFAULT_UNIT,
        };
        self.subs.push(Arc::new(SubIndex::from_view(view, base, unit)));
        self.stats.incorporated += 1;
        self.run_merges(unit);
        self.stats.max_sub_indexes = self.stats.max_sub_indexes.max(self.subs.len());
        Ok(self.publish())
    }

    fn run_merges(&mut self, unit: u32) {
        match self.policy {
            MergePolicy::NoMerge => {}
            MergePolicy::Immediate => {
                while self.subs.len() > 1 {
                    let b = self.subs.pop().expect("len > 1");
                    let a = self.subs.pop().expect("len > 1");
                    self.subs.push(Arc::new(merge_subindexes(&a, &b, unit)));
                    self.stats.merges += 1;
                }
                self.stats.doc_copies += self.subs.iter().map(|s| s.doc_count).sum::<u64>();
            }
            MergePolicy::Logarithmic { .. } => {
                let sizes: Vec<u64> = self.subs.iter().map(|s| s.doc_count).collect();
                for (i, j) in merge_plan(&sizes, unit) {
                    let b = self.subs.remove(j);
                    let merged = merge_subindexes(&self.subs[i], &b, unit);
                    self.stats.doc_copies += merged.doc_count;
                    self.stats.merges += 1;
                    self.subs[i] = Arc::new(merged);
                }
            }
        }
    }

    /// Resolves `key` and overwrites an in-place field. Returns `false` when
    /// the key has no live version.
    pub fn set_value(&mut self, field: &str, key: &str, value: &Value) -> Result<bool, MemIndexError> {
        let Some(&(ordinal, _)) = self.keymap.get(key) else {
            self.schema.validate_update(field, value)?;
            return Ok(false);
        };
        self.forward.set_value(&self.schema, field, ordinal, value)?;
        crate::metrics::record(|c| &c.inplace_writes);
        Ok(true)
    }

    pub fn forward(&self) -> &ForwardStore {
        &self.forward
    }

    /// Publishes the current state as a new snapshot.
    pub fn publish(&mut self) -> Arc<ReadSnapshot> {
        self.seq += 1;
        let snap = Arc::new(ReadSnapshot {
            seq: self.seq,
            schema: self.schema.clone(),
            subs: self.subs.clone(),
            tombstones: self.tombstones.clone(),
            live: self.live.clone(),
            forward: Arc::new(self.forward.clone()),
            docs: self.docs.clone(),
            len_sums: Arc::new(self.len_sums.clone()),
        });
        self.published.store(snap.clone());
        snap
    }

    /// The latest published snapshot.
    pub fn snapshot(&self) -> Arc<ReadSnapshot> {
        self.published.load_full()
    }

    /// Shared cell holding the latest snapshot, for readers on other threads.
    pub fn snapshot_cell(&self) -> Arc<ArcSwap<ReadSnapshot>> {
        self.published.clone()
    }

    /// Accounting bytes per component.
    pub fn footprint_parts(&self) -> FootprintParts {
        FootprintParts {
            base: BASE_FOOTPRINT,
            sub_indexes: self.subs.iter().map(|s| s.footprint).sum(),
            forward: self.forward.footprint(),
            key_map: self.keymap.keys().map(|k| k.len() + 32).sum(),
            doc_table: self.docs.values().map(|d| d.bytes()).sum(),
            doc_sets: self.tombstones.serialized_len() + self.live.serialized_len(),
        }
    }

    pub fn footprint(&self) -> usize {
        self.footprint_parts().total()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct FootprintParts {
    pub base: usize,
    pub sub_indexes: usize,
    pub forward: usize,
    pub key_map: usize,
    pub doc_table: usize,
    pub doc_sets: usize,
}

impl FootprintParts {
    pub fn total(&self) -> usize {
        self.base + self.sub_indexes + self.forward + self.key_map + self.doc_table + self.doc_sets
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::tests::products;
    use crate::schema::Document;
    use crate::segment::tests::{doc, random_doc, s};
    use crate::segment::{tokenize, SegmentBuffer};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn seal(schema: &Arc<IndexSchema>, id: u64, docs: &[Document]) -> SegmentView {
        let mut b = SegmentBuffer::new(schema.clone());
        for d in docs {
            b.add(d, id).unwrap();
        }
        SegmentView::open(&b.seal(id).unwrap(), schema.clone()).unwrap()
    }

    fn titled(key: &str, title: &str) -> Document {
        doc(&[("id", s(key)), ("title", s(title))])
    }

    fn ords(set: &DocIdSet) -> Vec<u32> {
        set.iter().collect()
    }

    #[test]
    fn levels_and_plan() {
        assert_eq!(level_for(1, 1), 0);
        assert_eq!(level_for(2, 1), 1);
        assert_eq!(level_for(1023, 1), 9);
        assert_eq!(level_for(1024, 1), 10);
        assert_eq!(level_for(2047, 1024), 0);
        assert_eq!(level_for(4096, 1024), 2);
        assert_eq!(merge_plan(&[1, 1], 1), vec![(0, 1)]);
        assert!(merge_plan(&[4, 2, 1], 1).is_empty());
        // cascade: [2,1] + 1 -> [2,2] -> [4]
        assert_eq!(merge_plan(&[2, 1, 1], 1), vec![(1, 2), (0, 1)]);
    }

    #[test]
    fn binary_counter_volume() {
        // oracle: count carries of a binary counter
        for k in 0..=10u32 {
            let n = 1u64 << k;
            let mut sizes: Vec<u64> = Vec::new();
            let mut volume = 0;
            for _ in 0..n {
                sizes.push(1);
                for (i, j) in merge_plan(&sizes, 1) {
                    sizes[i] += sizes[j];
                    volume += sizes[i];
                    sizes.remove(j);
                }
            }
            assert_eq!(volume, n * k as u64);
            assert_eq!(sizes, vec![n]);
        }
    }

    #[test]
    fn empty_index() {
        let idx = MemIndex::new(Arc::new(products()), MergePolicy::default());
        let snap = idx.snapshot();
        assert_eq!(snap.seq(), 0);
        assert!(snap.sub_indexes().is_empty());
        assert_eq!(idx.footprint(), BASE_FOOTPRINT + idx.forward().footprint() + DocIdSet::new().serialized_len() * 2);
    }

    #[test]
    fn incorporate_and_replace() {
        let schema = Arc::new(products());
        let mut idx = MemIndex::new(schema.clone(), MergePolicy::Logarithmic { unit: 1 });
        let snap = idx.incorporate(&seal(&schema, 1, &[titled("p1", "red shoe"), titled("p2", "blue shoe")])).unwrap();
        assert_eq!(snap.sub_indexes().len(), 1);
        assert!(snap.tombstones().is_empty());
        assert_eq!(ords(&snap.postings("title", "shoe").unwrap()), vec![0, 1]);

        let before = idx.snapshot();
        let after = idx.incorporate(&seal(&schema, 2, &[titled("p1", "green boot")])).unwrap();
        assert_eq!(ords(after.tombstones()), vec![0]);
        assert_eq!(ords(&after.postings("title", "shoe").unwrap()), vec![1]);
        assert_eq!(ords(&after.postings("title", "boot").unwrap()), vec![2]);
        assert!(after.postings("title", "red").unwrap().is_empty());
        assert!(after.seq() > before.seq());
        // the earlier snapshot is unchanged
        assert_eq!(ords(&before.postings("title", "red").unwrap()), vec![0]);
        assert!(before.postings("title", "boot").unwrap().is_empty());
        assert_eq!(idx.lookup_key("p1"), Some((2, 2)));
        assert_eq!(after.key_of(2), Some("p1"));
        assert!(matches!(after.postings("price", "x"), Err(MemIndexError::NonIndexedField(_))));
        assert!(matches!(after.postings("ghost", "x"), Err(MemIndexError::Schema(_))));
    }

    #[test]
    fn out_of_order_rejected() {
        let schema = Arc::new(products());
        let mut idx = MemIndex::new(schema.clone(), MergePolicy::default());
        idx.incorporate(&seal(&schema, 5, &[titled("a", "x")])).unwrap();
        let seq = idx.snapshot().seq();
        assert!(matches!(
            idx.incorporate(&seal(&schema, 5, &[titled("b", "x")])),
            Err(MemIndexError::OutOfOrder { segment_id: 5, last: 5 })
        ));
        assert!(idx.incorporate(&seal(&schema, 3, &[titled("b", "x")])).is_err());
        assert_eq!(idx.snapshot().seq(), seq);
    }

    #[test]
    fn sixteen_unit_segments_collapse_to_one() {
        let schema = Arc::new(products());
        let mut idx = MemIndex::new(schema.clone(), MergePolicy::Logarithmic { unit: 1 });
        for i in 0..16u64 {
            idx.incorporate(&seal(&schema, i + 1, &[titled(&format!("k{i}"), "shoe")])).unwrap();
            let total = i + 1;
            assert!(idx.sub_index_count() as u32 <= 63 - total.leading_zeros() + 1);
        }
        assert_eq!(idx.sub_index_count(), 1);
        assert_eq!(idx.stats().doc_copies, 16 * 4);
    }

    #[test]
    fn policies_account_volume() {
        let schema = Arc::new(products());
        for (policy, volume, count) in [
            (MergePolicy::Immediate, 64 * 65 / 2, 1),
            (MergePolicy::NoMerge, 0, 64),
            (MergePolicy::Logarithmic { unit: 1 }, 64 * 6, 1),
        ] {
            let mut idx = MemIndex::new(schema.clone(), policy);
            for i in 0..64u64 {
                idx.incorporate(&seal(&schema, i + 1, &[titled(&format!("k{i}"), "a b")])).unwrap();
            }
            assert_eq!(idx.stats().doc_copies, volume, "{policy:?}");
            assert_eq!(idx.sub_index_count(), count, "{policy:?}");
            assert_eq!(idx.snapshot().postings("title", "a").unwrap().len(), 64);
        }
    }

    #[test]
    fn merge_examples() {
        let mk = |ord: u32| {
            let mut m = BTreeMap::new();
            m.insert((1, "shoe".to_string()), PostingList { docs: [ord].into_iter().collect(), tfs: vec![1], positions: vec![0] });
            SubIndex::new(m, vec![(ord as u64, ord, 1)], 1)
        };
        let m = merge_subindexes(&mk(0), &mk(100), 1);
        assert_eq!(ords(&m.lookup(1, "shoe").unwrap().docs), vec![0, 100]);
        assert_eq!(m.bases(), &[(0, 0, 1), (100, 100, 1)]);
        let empty = SubIndex::new(BTreeMap::new(), vec![], 1);
        let x = merge_subindexes(&mk(7), &empty, 1);
        assert_eq!(x.lookup(1, "shoe"), mk(7).lookup(1, "shoe"));
        assert_eq!(x.terms().count(), 1);
    }

    #[test]
    fn in_range_only() {
        let schema = Arc::new(products());
        let range = KeyRange { lo: "m".into(), hi: None };
        let mut idx = MemIndex::with_range(schema.clone(), MergePolicy::default(), range);
        let snap = idx.incorporate(&seal(&schema, 1, &[titled("apple", "shoe"), titled("melon", "shoe")])).unwrap();
        assert_eq!(ords(&snap.postings("title", "shoe").unwrap()), vec![1]);
        assert_eq!(idx.lookup_key("apple"), None);
        assert!(KeyRange { lo: "".into(), hi: Some("m".into()) }.contains("apple"));
        assert!(!KeyRange { lo: "".into(), hi: Some("m".into()) }.contains("m"));
    }

    #[test]
    fn set_value_goes_to_next_snapshot() {
        let schema = Arc::new(products());
        let mut idx = MemIndex::new(schema.clone(), MergePolicy::default());
        let mut d = titled("p1", "shoe");
        d.insert("price".into(), Value::Float(5.0));
        idx.incorporate(&seal(&schema, 1, &[d])).unwrap();
        let old = idx.snapshot();
        assert!(idx.set_value("price", "p1", &Value::Float(9.0)).unwrap());
        assert!(!idx.set_value("price", "nobody", &Value::Float(9.0)).unwrap());
        let new = idx.publish();
        assert_eq!(old.field_value(3, 0), Some(Value::Float(5.0)));
        assert_eq!(new.field_value(3, 0), Some(Value::Float(9.0)));
    }

    #[test]
    fn footprint_is_sum_of_parts_and_monotone() {
        let schema = Arc::new(products());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx = MemIndex::new(schema.clone(), MergePolicy::Logarithmic { unit: 4 });
        let mut last = idx.footprint();
        for seg in 1..30u64 {
            let docs: Vec<Document> = (0..rng.gen_range(1..20))
                .map(|_| {
                    let key = format!("k{}", rng.gen_range(0..50));
                    random_doc(&mut rng, &key)
                })
                .collect();
            idx.incorporate(&seal(&schema, seg, &docs)).unwrap();
            let p = idx.footprint_parts();
            let recomputed = BASE_FOOTPRINT
                + idx.subs.iter().map(|s| s.footprint()).sum::<usize>()
                + idx.forward().footprint()
                + idx.keys().map(|k| k.len() + 32).sum::<usize>()
                + p.doc_table
                + idx.tombstones.serialized_len()
                + idx.live.serialized_len();
            assert_eq!(p.total(), recomputed);
            assert!(idx.footprint() >= last);
            last = idx.footprint();
        }
    }

    /// Naive postings over the latest version of every key.
    fn naive(schema: &IndexSchema, versions: &[(u64, Document)]) -> BTreeMap<(FieldId, String), BTreeSet<String>> {
        let mut latest: BTreeMap<String, &Document> = BTreeMap::new();
        for (_, d) in versions {
            latest.insert(d["id"].as_str().unwrap().to_string(), d);
        }
        let mut m: BTreeMap<(FieldId, String), BTreeSet<String>> = BTreeMap::new();
        for (key, d) in latest {
            for (name, v) in d {
                let fid = schema.field_id(name).unwrap();
                if !schema.is_indexed(fid) {
                    continue;
                }
                let toks = if schema.fields[fid as usize].kind == FieldKind::Text {
                    tokenize(v.as_str().unwrap())
                } else {
                    vec![v.as_str().unwrap().to_string()]
                };
                for t in toks {
                    m.entry((fid, t)).or_default().insert(key.clone());
                }
            }
        }
        m
    }

    fn check_corpus(seed: u64) {
        let schema = Arc::new(products());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = rng.gen_range(1..8);
        let mut idx = MemIndex::new(schema.clone(), MergePolicy::Logarithmic { unit });
        let n = rng.gen_range(1..300);
        let docs: Vec<Document> = (0..n)
            .map(|_| {
                let key = format!("k{:03}", rng.gen_range(0..n / 2 + 1));
                random_doc(&mut rng, &key)
            })
            .collect();
        let mut versions = Vec::new();
        let mut at = 0;
        let mut seg = 0;
        while at < docs.len() {
            let len = rng.gen_range(1..=(docs.len() - at).min(40));
            seg += 1 + rng.gen_range(0..3);
            idx.incorporate(&seal(&schema, seg, &docs[at..at + len])).unwrap();
            versions.extend(docs[at..at + len].iter().map(|d| (seg, d.clone())));
            at += len;
            let total = idx.ordinal_space() as u64;
            let bound = if total < unit as u64 { 1 } else { level_for(total, unit) as usize + 1 };
            assert!(idx.sub_index_count() <= bound);
        }
        let snap = idx.snapshot();
        let oracle = naive(&schema, &versions);
        for ((fid, term), keys) in &oracle {
            let got: BTreeSet<String> =
                snap.postings_by_id(*fid, term).iter().map(|o| snap.key_of(o).unwrap().to_string()).collect();
            assert_eq!(&got, keys, "term {term}");
        }
        let live: BTreeSet<&str> = snap.live_ordinals().map(|o| snap.key_of(o).unwrap()).collect();
        assert_eq!(live.len() as u64, snap.live_count());
        assert_eq!(live.len(), versions.iter().map(|(_, d)| d["id"].as_str().unwrap()).collect::<BTreeSet<_>>().len());
        // BM25 length sums track live docs
        let want: u64 = snap.live_ordinals().map(|o| snap.field_len(1, o) as u64).sum();
        assert!((snap.avg_len(1) * snap.live_count() as f64 - want as f64).abs() < 1e-6);
        // the forward store holds the latest version's values
        for o in snap.live_ordinals() {
            let d = &snap.stored(o).unwrap().doc;
            assert_eq!(snap.field_value(3, o), d.get("price").cloned());
        }
    }

    #[test]
    fn random_corpora_match_naive_postings() {
        for seed in 0..100 {
            check_corpus(seed);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn merge_equals_per_term_union(seed in any::<u64>()) {
            let schema = Arc::new(products());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a_docs: Vec<Document> = (0..rng.gen_range(1..60)).map(|i| random_doc(&mut rng, &format!("a{i}"))).collect();
            let b_docs: Vec<Document> = (0..rng.gen_range(1..60)).map(|i| random_doc(&mut rng, &format!("b{i}"))).collect();
            let a = SubIndex::from_view(&seal(&schema, 1, &a_docs), 0, 1);
            let b = SubIndex::from_view(&seal(&schema, 2, &b_docs), 5000, 1);
            let m = merge_subindexes(&a, &b, 1);
            prop_assert!(m.footprint() <= a.footprint() + b.footprint());
            let keys: BTreeSet<_> = a.terms().chain(b.terms()).map(|(k, _)| k.clone()).collect();
            prop_assert_eq!(m.terms().count(), keys.len());
            for (f, t) in keys {
                let empty = DocIdSet::new();
                let da = a.lookup(f, &t).map_or(&empty, |p| &p.docs);
                let db = b.lookup(f, &t).map_or(&empty, |p| &p.docs);
                prop_assert_eq!(&m.lookup(f, &t).unwrap().docs, &da.union(db));
            }
        }

        #[test]
        fn latest_version_wins(versions in proptest::collection::vec((0u8..6, 0u8..4), 1..40)) {
            let schema = Arc::new(products());
            let mut idx = MemIndex::new(schema.clone(), MergePolicy::Logarithmic { unit: 2 });
            let mut latest = BTreeMap::new();
            for (seg, (key, word)) in versions.iter().enumerate() {
                let key = format!("k{key}");
                let word = ["red", "blue", "green", "gray"][*word as usize];
                idx.incorporate(&seal(&schema, seg as u64 + 1, &[titled(&key, word)])).unwrap();
                latest.insert(key, word);
            }
            let snap = idx.snapshot();
            for (key, word) in &latest {
                for w in ["red", "blue", "green", "gray"] {
                    let hit = snap.postings("title", w).unwrap().iter().any(|o| snap.key_of(o) == Some(key.as_str()));
                    prop_assert_eq!(hit, w == *word);
                }
            }
            prop_assert_eq!(snap.live_count() as usize, latest.len());
        }
    }
}
