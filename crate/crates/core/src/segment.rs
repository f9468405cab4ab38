//! Segment writer and reader.
//!
//! A write node accumulates documents in a [`SegmentBuffer`] (postings with
//! term frequencies and positions, doc values, stored documents) and seals
//! it in one pass over the postings map into an immutable segment file.
//! [`SegmentView`] parses a segment file back into memory.
//!
//! File layout. Fixed-width integers are little-endian; `var` is an
//! unsigned LEB128 varint and `zvar` its zigzag signed form.
//!
//! ```text
//! header     "SSEG" u16 version=1 u64 segment_id u32 doc_count
//! sections   5 x (u64 offset, u64 len): term-dict, postings, positions, docvalues, stored
//! term-dict  repeated: u16 field_id, var term_len, term bytes, var postings_offset
//! postings   per term: doc-id set, var tf per doc, var positions_offset
//! positions  per term, per doc: tf positions as var, first absolute then deltas
//! docvalues  u16 column_count, then per column: u16 field_id, u8 tag, payload
//!              tag 0 zvar i64 x doc_count | tag 1 f64 bits x doc_count
//!              tag 2 var dict_len, dict (var len + bytes), var ref x doc_count
//!              tag 3 var token count x doc_count (text field lengths)
//! stored     per doc: var publish ts_ms, var len, JSON document
//! trailer    u32 CRC-32 of every preceding byte
//! ```
//!
//! Offsets in the term dictionary are relative to the postings section and
//! positions offsets are relative to the positions section.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use integer_encoding::VarInt;
use thiserror::Error;

use crate::codec::{CodecError, DocIdSet};
use crate::schema::{Document, FieldId, FieldKind, IndexSchema, SchemaError, Value};

pub const MAGIC: &[u8; 4] = b"SSEG";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8 + 4;
const SECTION_COUNT: usize = 5;
const TABLE_LEN: usize = SECTION_COUNT * 16;
const TRAILER_LEN: usize = 4;

pub const MISSING_I64: i64 = i64::MIN;
pub const MISSING_ENUM: u32 = u32::MAX;

const TAG_I64: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_ENUM: u8 = 2;
const TAG_LEN: u8 = 3;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("document violates schema: {0}")]
    Schema(#[from] SchemaError),
    #[error("cannot seal an empty buffer")]
    Empty,
    #[error("segment buffer already sealed")]
    Consumed,
    #[error("bad segment magic")]
    BadMagic,
    #[error("unsupported segment version {0}")]
    UnsupportedVersion(u16),
    #[error("segment checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("corrupt segment at offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("field `{0}` is not an indexed field")]
    NonIndexedField(String),
}

/// Lowercases, splits on every non-alphanumeric character and drops empty
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Object-store key for a segment.
pub fn segment_key(shard_id: u32, segment_id: u64) -> String {
    format!("shards/{shard_id}/segments/{segment_id:020}.sseg")
}

pub fn segment_prefix(shard_id: u32) -> String {
    format!("shards/{shard_id}/segments/")
}

fn put_var(out: &mut Vec<u8>, v: u64) {
    let mut buf = [0u8; 10];
    let n = v.encode_var(&mut buf);
    out.extend_from_slice(&buf[..n]);
}

fn put_var_i64(out: &mut Vec<u8>, v: i64) {
    let mut buf = [0u8; 10];
    let n = v.encode_var(&mut buf);
    out.extend_from_slice(&buf[..n]);
}

/// Inverse of [`segment_key`].
pub fn parse_segment_key(key: &str) -> Option<(u32, u64)> {
    let rest = key.strip_prefix("shards/")?;
    let (shard, rest) = rest.split_once('/')?;
    let id = rest.strip_prefix("segments/")?.strip_suffix(".sseg")?;
    Some((shard.parse().ok()?, id.parse().ok()?))
}

/// Postings of one term: documents, term frequencies aligned with the
/// documents' iteration order, and positions flattened in the same order
/// (`tfs[i]` positions per document).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PostingList {
    pub docs: DocIdSet,
    pub tfs: Vec<u32>,
    pub positions: Vec<u32>,
}

impl PostingList {
    /// `(doc, tf, positions)` triples in doc order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u32, &[u32])> + '_ {
        let mut at = 0usize;
        self.docs.iter().zip(self.tfs.iter()).map(move |(d, &tf)| {
            let p = &self.positions[at..at + tf as usize];
            at += tf as usize;
            (d, tf, p)
        })
    }

    pub fn heap_bytes(&self) -> usize {
        self.docs.heap_bytes() + self.tfs.capacity() * 4 + self.positions.capacity() * 4
    }

    /// Merges two lists over disjoint document sets.
    pub fn merge_disjoint(a: &PostingList, b: &PostingList) -> PostingList {
        let docs = a.docs.union(&b.docs);
        let mut tfs = Vec::with_capacity(a.tfs.len() + b.tfs.len());
        let mut positions = Vec::with_capacity(a.positions.len() + b.positions.len());
        let mut ia = a.entries().peekable();
        let mut ib = b.entries().peekable();
        loop {
            let take_a = match (ia.peek(), ib.peek()) {
                (Some(x), Some(y)) => {
                    debug_assert_ne!(x.0, y.0, "merged posting lists overlap");
                    x.0 < y.0
                }
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            let (_, tf, p) = if take_a { ia.next() } else { ib.next() }.expect("peeked");
            tfs.push(tf);
            positions.extend_from_slice(p);
        }
        PostingList { docs, tfs, positions }
    }
}

#[derive(Debug, Default)]
struct BufferedPostings {
    docs: Vec<u32>,
    tfs: Vec<u32>,
    positions: Vec<u32>,
}

/// One column of per-document scalar values.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    I64(Vec<i64>),
    F64(Vec<f64>),
    /// Per-segment string dictionary with one reference per document.
    Enum { dict: Vec<String>, refs: Vec<u32> },
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::I64(v) => v.len(),
            Column::F64(v) => v.len(),
            Column::Enum { refs, .. } => refs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of document `local`, `None` for the missing sentinel.
    pub fn value(&self, local: u32) -> Option<Value> {
        match self {
            Column::I64(v) => Some(v[local as usize]).filter(|&x| x != MISSING_I64).map(Value::Int),
            Column::F64(v) => Some(v[local as usize]).filter(|x| !x.is_nan()).map(Value::Float),
            Column::Enum { dict, refs } => {
                let r = refs[local as usize];
                (r != MISSING_ENUM).then(|| Value::Str(dict[r as usize].clone()))
            }
        }
    }
}

enum ColumnBuilder {
    I64(Vec<i64>),
    F64(Vec<f64>),
    Enum { dict: Vec<String>, ids: HashMap<String, u32>, refs: Vec<u32> },
}

impl ColumnBuilder {
    fn for_kind(kind: FieldKind) -> Self {
        match kind {
            FieldKind::Int64 => ColumnBuilder::I64(Vec::new()),
            FieldKind::Float64 => ColumnBuilder::F64(Vec::new()),
            FieldKind::Keyword => ColumnBuilder::Enum { dict: Vec::new(), ids: HashMap::new(), refs: Vec::new() },
            FieldKind::Text => unreachable!("text fields have no doc values"),
        }
    }

    fn push(&mut self, v: Option<&Value>) -> usize {
        match self {
            ColumnBuilder::I64(c) => {
                c.push(v.and_then(Value::as_i64).unwrap_or(MISSING_I64));
                8
            }
            ColumnBuilder::F64(c) => {
                c.push(v.and_then(Value::as_f64).unwrap_or(f64::NAN));
                8
            }
            ColumnBuilder::Enum { dict, ids, refs } => match v.and_then(Value::as_str) {
                None => {
                    refs.push(MISSING_ENUM);
                    4
                }
                Some(s) => {
                    let mut grown = 4;
                    let id = *ids.entry(s.to_string()).or_insert_with(|| {
                        dict.push(s.to_string());
                        grown += s.len() + 4;
                        (dict.len() - 1) as u32
                    });
                    refs.push(id);
                    grown
                }
            },
        }
    }
}

enum BufferState {
    Open,
    Sealed,
}

/// In-memory accumulation of documents for one future segment.
pub struct SegmentBuffer {
    schema: Arc<IndexSchema>,
    state: BufferState,
    postings: BTreeMap<(FieldId, String), BufferedPostings>,
    columns: Vec<(FieldId, ColumnBuilder)>,
    lengths: Vec<(FieldId, Vec<u32>)>,
    stored: Vec<(u64, Vec<u8>)>,
    doc_count: u32,
    footprint: usize,
    postings_passes: u32,
}

impl SegmentBuffer {
    pub fn new(schema: Arc<IndexSchema>) -> Self {
        let columns = schema
            .fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind.is_scalar())
            .map(|(i, f)| (i as FieldId, ColumnBuilder::for_kind(f.kind)))
            .collect();
        let lengths = schema
            .fields
            .iter()
            .enumerate()
            .filter(|(_, f)| f.kind == FieldKind::Text)
            .map(|(i, _)| (i as FieldId, Vec::new()))
            .collect();
        SegmentBuffer {
            schema,
            state: BufferState::Open,
            postings: BTreeMap::new(),
            columns,
            lengths,
            stored: Vec::new(),
            doc_count: 0,
            footprint: 0,
            postings_passes: 0,
        }
    }

    pub fn doc_count(&self) -> u32 {
        self.doc_count
    }

    /// Approximate bytes held by the buffer.
    pub fn footprint(&self) -> usize {
        self.footprint
    }

    /// How many times the postings map has been traversed.
    pub fn postings_passes(&self) -> u32 {
        self.postings_passes
    }

    /// Adds a document published at `ts_ms`; returns its local id.
    pub fn add(&mut self, doc: &Document, ts_ms: u64) -> Result<u32, SegmentError> {
        crate::metrics::record(|c| &c.segment_writer_calls);
        if matches!(self.state, BufferState::Sealed) {
            return Err(SegmentError::Consumed);
        }
        self.schema.validate_document(doc)?;
        let local = self.doc_count;
        let mut grown = 0usize;

        for (fid, spec) in self.schema.fields.iter().enumerate() {
            let fid = fid as FieldId;
            if !self.schema.is_indexed(fid) {
                continue;
            }
            let Some(Value::Str(text)) = doc.get(&spec.name) else {
                continue;
            };
            let tokens = match spec.kind {
                FieldKind::Text => tokenize(text),
                _ => vec![text.clone()],
            };
            for (pos, tok) in tokens.into_iter().enumerate() {
                let tok_len = tok.len();
                let entry = self.postings.entry((fid, tok)).or_insert_with(|| {
                    grown += tok_len + 48;
                    BufferedPostings::default()
                });
                if entry.docs.last() == Some(&local) {
                    *entry.tfs.last_mut().expect("tf per doc") += 1;
                } else {
                    entry.docs.push(local);
                    entry.tfs.push(1);
                    grown += 8;
                }
                entry.positions.push(pos as u32);
                grown += 4;
            }
        }

        for (fid, col) in &mut self.columns {
            let name = &self.schema.fields[*fid as usize].name;
            grown += col.push(doc.get(name));
        }
        for (fid, lens) in &mut self.lengths {
            let name = &self.schema.fields[*fid as usize].name;
            let n = doc.get(name).and_then(Value::as_str).map(|t| tokenize(t).len()).unwrap_or(0);
            lens.push(n as u32);
            grown += 4;
        }

        let json = serde_json::to_vec(doc).expect("document serializes");
        grown += json.len() + 12;
        self.stored.push((ts_ms, json));
        self.doc_count += 1;
        self.footprint += grown;
        Ok(local)
    }

    /// Serializes the buffer into a segment file. The buffer is consumed:
    /// any later `add` or `seal` fails.
    pub fn seal(&mut self, segment_id: u64) -> Result<Vec<u8>, SegmentError> {
        crate::metrics::record(|c| &c.segment_writer_calls);
        if matches!(self.state, BufferState::Sealed) {
            return Err(SegmentError::Consumed);
        }
        if self.doc_count == 0 {
            return Err(SegmentError::Empty);
        }
        self.state = BufferState::Sealed;
        let postings = std::mem::take(&mut self.postings);

        let mut dict = Vec::new();
        let mut post = Vec::new();
        let mut pos = Vec::new();
        self.postings_passes += 1;
        for ((fid, term), p) in postings {
            dict.extend_from_slice(&fid.to_le_bytes());
            put_var(&mut dict, term.len() as u64);
            dict.extend_from_slice(term.as_bytes());
            put_var(&mut dict, post.len() as u64);

            DocIdSet::from_sorted_iter(p.docs.iter().copied()).serialize_into(&mut post);
            for &tf in &p.tfs {
                put_var(&mut post, u64::from(tf));
            }
            put_var(&mut post, pos.len() as u64);

            let mut at = 0usize;
            for &tf in &p.tfs {
                let mut prev = 0u32;
                for (i, &x) in p.positions[at..at + tf as usize].iter().enumerate() {
                    let enc = if i == 0 { x } else { x - prev };
                    put_var(&mut pos, u64::from(enc));
                    prev = x;
                }
                at += tf as usize;
            }
        }

        let mut dv = Vec::new();
        let columns = std::mem::take(&mut self.columns);
        let lengths = std::mem::take(&mut self.lengths);
        dv.extend_from_slice(&((columns.len() + lengths.len()) as u16).to_le_bytes());
        for (fid, col) in columns {
            dv.extend_from_slice(&fid.to_le_bytes());
            match col {
                ColumnBuilder::I64(v) => {
                    dv.push(TAG_I64);
                    v.iter().for_each(|&x| put_var_i64(&mut dv, x));
                }
                ColumnBuilder::F64(v) => {
                    dv.push(TAG_F64);
                    v.iter().for_each(|x| dv.extend_from_slice(&x.to_le_bytes()));
                }
                ColumnBuilder::Enum { dict: d, refs, .. } => {
                    dv.push(TAG_ENUM);
                    put_var(&mut dv, d.len() as u64);
                    for s in &d {
                        put_var(&mut dv, s.len() as u64);
                        dv.extend_from_slice(s.as_bytes());
                    }
                    refs.iter().for_each(|&x| put_var(&mut dv, u64::from(x)));
                }
            }
        }
        for (fid, lens) in lengths {
            dv.extend_from_slice(&fid.to_le_bytes());
            dv.push(TAG_LEN);
            lens.iter().for_each(|&x| put_var(&mut dv, u64::from(x)));
        }

        let mut stored = Vec::new();
        for (ts, json) in std::mem::take(&mut self.stored) {
            put_var(&mut stored, ts);
            put_var(&mut stored, json.len() as u64);
            stored.extend_from_slice(&json);
        }

        let sections = [dict, post, pos, dv, stored];
        let body: usize = sections.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(HEADER_LEN + TABLE_LEN + body + TRAILER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&segment_id.to_le_bytes());
        out.extend_from_slice(&self.doc_count.to_le_bytes());
        let mut offset = (HEADER_LEN + TABLE_LEN) as u64;
        for s in &sections {
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(s.len() as u64).to_le_bytes());
            offset += s.len() as u64;
        }
        for s in &sections {
            out.extend_from_slice(s);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }
}

/// A term's postings inside a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct TermEntry {
    pub field: FieldId,
    pub term: String,
    pub postings: PostingList,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDoc {
    pub ts_ms: u64,
    pub doc: Document,
}

/// An opened, immutable segment.
#[derive(Debug)]
pub struct SegmentView {
    schema: Arc<IndexSchema>,
    segment_id: u64,
    doc_count: u32,
    terms: Vec<TermEntry>,
    columns: HashMap<FieldId, Column>,
    lengths: HashMap<FieldId, Vec<u32>>,
    stored: Vec<StoredDoc>,
    byte_len: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], base: usize) -> Self {
        Cursor { bytes, pos: 0, base }
    }
    fn corrupt(&self, reason: impl Into<String>) -> SegmentError {
        SegmentError::Corrupt { offset: self.base + self.pos, reason: reason.into() }
    }
    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], SegmentError> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, SegmentError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, SegmentError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, SegmentError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, SegmentError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn var(&mut self) -> Result<u64, SegmentError> {
        match u64::decode_var(&self.bytes[self.pos..]) {
            Some((v, n)) => {
                self.pos += n;
                Ok(v)
            }
            None => Err(self.corrupt("bad varint")),
        }
    }
    fn var_u32(&mut self) -> Result<u32, SegmentError> {
        let v = self.var()?;
        u32::try_from(v).map_err(|_| self.corrupt("varint exceeds 32 bits"))
    }
    fn var_i64(&mut self) -> Result<i64, SegmentError> {
        match i64::decode_var(&self.bytes[self.pos..]) {
            Some((v, n)) => {
                self.pos += n;
                Ok(v)
            }
            None => Err(self.corrupt("bad varint")),
        }
    }
    fn string(&mut self, n: usize) -> Result<String, SegmentError> {
        let at = self.pos;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| SegmentError::Corrupt {
            offset: self.base + at,
            reason: "invalid utf-8".into(),
        })
    }
}

impl SegmentView {
    /// Verifies and parses a segment file.
    pub fn open(bytes: &[u8], schema: Arc<IndexSchema>) -> Result<SegmentView, SegmentError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(SegmentError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + TABLE_LEN + TRAILER_LEN {
            return Err(SegmentError::Corrupt { offset: bytes.len(), reason: "truncated header".into() });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - TRAILER_LEN);
        let stored_crc = u32::from_le_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored_crc != computed {
            return Err(SegmentError::ChecksumMismatch { stored: stored_crc, computed });
        }

        let mut h = Cursor::new(&body[4..], 4);
        let version = h.u16()?;
        if version != VERSION {
            return Err(SegmentError::UnsupportedVersion(version));
        }
        let segment_id = h.u64()?;
        let doc_count = h.u32()?;
        let mut sections = [(0usize, 0usize); SECTION_COUNT];
        let mut expected = HEADER_LEN + TABLE_LEN;
        for s in sections.iter_mut() {
            let (off, len) = (h.u64()? as usize, h.u64()? as usize);
            if off != expected || off.checked_add(len).is_none_or(|end| end > body.len()) {
                return Err(h.corrupt("section table out of bounds"));
            }
            *s = (off, len);
            expected = off + len;
        }
        if expected != body.len() {
            return Err(SegmentError::Corrupt { offset: expected, reason: "sections do not cover body".into() });
        }
        let section = |i: usize| {
            let (off, len) = sections[i];
            Cursor::new(&body[off..off + len], off)
        };

        let mut view = SegmentView {
            schema,
            segment_id,
            doc_count,
            terms: Vec::new(),
            columns: HashMap::new(),
            lengths: HashMap::new(),
            stored: Vec::with_capacity(doc_count as usize),
            byte_len: bytes.len(),
        };

        let post_sec = &body[sections[1].0..sections[1].0 + sections[1].1];
        let pos_sec = &body[sections[2].0..sections[2].0 + sections[2].1];
        let mut dict = section(0);
        while !dict.done() {
            let field = dict.u16()?;
            if !view.schema.is_indexed(field) {
                return Err(dict.corrupt(format!("term for non-indexed field id {field}")));
            }
            let tlen = dict.var()? as usize;
            let term = dict.string(tlen)?;
            let poff = dict.var()? as usize;
            if let Some(prev) = view.terms.last() {
                if (prev.field, prev.term.as_str()) >= (field, term.as_str()) {
                    return Err(dict.corrupt("term dictionary not sorted"));
                }
            }
            if poff > post_sec.len() {
                return Err(dict.corrupt("postings offset out of bounds"));
            }
            let (docs, used) = DocIdSet::deserialize_prefix(&post_sec[poff..])?;
            if docs.is_empty() || docs.iter().last().is_some_and(|d| d >= doc_count) {
                return Err(dict.corrupt(format!("postings of `{term}` out of range")));
            }
            let mut pc = Cursor::new(&post_sec[poff + used..], sections[1].0 + poff + used);
            let n = docs.len() as usize;
            let mut tfs = Vec::with_capacity(n);
            for _ in 0..n {
                tfs.push(pc.var_u32()?);
            }
            let pos_off = pc.var()? as usize;
            let total: usize = tfs.iter().map(|&t| t as usize).sum();
            // every position takes at least one byte
            if pos_off.checked_add(total).is_none_or(|end| end > pos_sec.len()) {
                return Err(pc.corrupt("positions out of bounds"));
            }
            let mut rc = Cursor::new(&pos_sec[pos_off..], sections[2].0 + pos_off);
            let mut positions = Vec::with_capacity(total);
            for &tf in &tfs {
                let mut prev = 0u32;
                for i in 0..tf {
                    let x = rc.var_u32()?;
                    let abs = if i == 0 { x } else { prev.checked_add(x).ok_or_else(|| rc.corrupt("position overflow"))? };
                    positions.push(abs);
                    prev = abs;
                }
            }
            view.terms.push(TermEntry { field, term, postings: PostingList { docs, tfs, positions } });
        }

        let mut dv = section(3);
        let ncols = dv.u16()?;
        for _ in 0..ncols {
            let field = dv.u16()?;
            let spec = view
                .schema
                .field_by_id(field)
                .ok_or_else(|| dv.corrupt(format!("unknown field id {field}")))?;
            let tag = dv.u8()?;
            let n = doc_count as usize;
            match (tag, spec.kind) {
                (TAG_I64, FieldKind::Int64) => {
                    let v = (0..n).map(|_| dv.var_i64()).collect::<Result<_, _>>()?;
                    view.columns.insert(field, Column::I64(v));
                }
                (TAG_F64, FieldKind::Float64) => {
                    let v = (0..n).map(|_| dv.u64().map(f64::from_bits)).collect::<Result<_, _>>()?;
                    view.columns.insert(field, Column::F64(v));
                }
                (TAG_ENUM, FieldKind::Keyword) => {
                    let dlen = dv.var()? as usize;
                    let mut d = Vec::with_capacity(dlen.min(n));
                    for _ in 0..dlen {
                        let l = dv.var()? as usize;
                        d.push(dv.string(l)?);
                    }
                    let refs: Vec<u32> = (0..n).map(|_| dv.var_u32()).collect::<Result<_, _>>()?;
                    if refs.iter().any(|&r| r != MISSING_ENUM && r as usize >= d.len()) {
                        return Err(dv.corrupt("enum reference out of range"));
                    }
                    view.columns.insert(field, Column::Enum { dict: d, refs });
                }
                (TAG_LEN, FieldKind::Text) => {
                    let v = (0..n).map(|_| dv.var_u32()).collect::<Result<_, _>>()?;
                    view.lengths.insert(field, v);
                }
                _ => return Err(dv.corrupt(format!("column tag {tag} does not fit field `{}`", spec.name))),
            }
        }
        if !dv.done() {
            return Err(dv.corrupt("trailing doc values"));
        }

        let mut st = section(4);
        for _ in 0..doc_count {
            let ts_ms = st.var()?;
            let len = st.var()? as usize;
            let at = st.pos;
            let json = st.take(len)?;
            let doc: Document = serde_json::from_slice(json).map_err(|e| SegmentError::Corrupt {
                offset: st.base + at,
                reason: format!("stored document: {e}"),
            })?;
            view.stored.push(StoredDoc { ts_ms, doc });
        }
        if !st.done() {
            return Err(st.corrupt("trailing stored bytes"));
        }
        let pk = view.schema.primary_key_id();
        match view.columns.get(&pk) {
            Some(Column::Enum { refs, .. }) if refs.iter().all(|&r| r != MISSING_ENUM) => {}
            _ => return Err(SegmentError::Corrupt { offset: sections[3].0, reason: "primary key column missing".into() }),
        }
        Ok(view)
    }

    pub fn schema(&self) -> &Arc<IndexSchema> {
        &self.schema
    }

    pub fn segment_id(&self) -> u64 {
        self.segment_id
    }

    pub fn doc_count(&self) -> u32 {
        self.doc_count
    }

    /// Size of the segment file in bytes.
    pub fn byte_len(&self) -> usize {
        self.byte_len
    }

    /// Sorted term dictionary with postings.
    pub fn terms(&self) -> &[TermEntry] {
        &self.terms
    }

    /// Postings of `term` in `field`, or `None` when the term is absent.
    pub fn lookup(&self, field: &str, term: &str) -> Result<Option<&PostingList>, SegmentError> {
        let fid = self.schema.field(field)?;
        let fid = self.schema.field_id(&fid.name).expect("field exists");
        if !self.schema.is_indexed(fid) {
            return Err(SegmentError::NonIndexedField(field.to_string()));
        }
        Ok(self.lookup_id(fid, term))
    }

    pub fn lookup_id(&self, field: FieldId, term: &str) -> Option<&PostingList> {
        self.terms
            .binary_search_by(|e| (e.field, e.term.as_str()).cmp(&(field, term)))
            .ok()
            .map(|i| &self.terms[i].postings)
    }

    pub fn column(&self, field: FieldId) -> Option<&Column> {
        self.columns.get(&field)
    }

    /// Token counts of a text field, one per document.
    pub fn field_lengths(&self, field: FieldId) -> Option<&[u32]> {
        self.lengths.get(&field).map(Vec::as_slice)
    }

    pub fn stored(&self) -> &[StoredDoc] {
        &self.stored
    }

    /// Primary keys in local-id order.
    pub fn keys(&self) -> Vec<&str> {
        match &self.columns[&self.schema.primary_key_id()] {
            Column::Enum { dict, refs } => refs.iter().map(|&r| dict[r as usize].as_str()).collect(),
            _ => unreachable!("primary key column is an enum column"),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::schema::tests::products;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn doc(pairs: &[(&str, Value)]) -> Document {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    pub(crate) fn s(v: &str) -> Value {
        Value::Str(v.into())
    }

    const WORDS: &[&str] = &["red", "blue", "shoe", "boot", "leather", "cheap", "sale", "green", "wool", "sock"];

    pub(crate) fn random_doc(rng: &mut ChaCha8Rng, key: &str) -> Document {
        let mut d = doc(&[("id", s(key))]);
        let n = rng.gen_range(0..8);
        let title: Vec<&str> = (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect();
        d.insert("title".into(), s(&title.join(if rng.gen_bool(0.5) { " " } else { "-" }).to_uppercase()));
        if rng.gen_bool(0.7) {
            d.insert("price".into(), Value::Float(rng.gen_range(0..1000) as f64 / 10.0));
        }
        if rng.gen_bool(0.5) {
            d.insert("stock_level".into(), Value::Int(rng.gen_range(-5..50)));
        }
        if rng.gen_bool(0.5) {
            d.insert("tags".into(), s(WORDS[rng.gen_range(0..3)]));
        }
        d
    }

    /// Naive postings oracle: (field, term) -> [(doc, positions)].
    fn naive_postings(schema: &IndexSchema, docs: &[Document]) -> BTreeMap<(FieldId, String), Vec<(u32, Vec<u32>)>> {
        let mut m: BTreeMap<(FieldId, String), Vec<(u32, Vec<u32>)>> = BTreeMap::new();
        for (i, d) in docs.iter().enumerate() {
            for (name, v) in d {
                let fid = schema.field_id(name).unwrap();
                if !schema.is_indexed(fid) {
                    continue;
                }
                let text = v.as_str().unwrap();
                let toks: Vec<String> = if schema.fields[fid as usize].kind == FieldKind::Text {
                    text.to_lowercase()
                        .split(|c: char| !c.is_alphanumeric())
                        .filter(|t| !t.is_empty())
                        .map(str::to_string)
                        .collect()
                } else {
                    vec![text.to_string()]
                };
                for (p, t) in toks.into_iter().enumerate() {
                    let list = m.entry((fid, t)).or_default();
                    match list.last_mut() {
                        Some((d, ps)) if *d == i as u32 => ps.push(p as u32),
                        _ => list.push((i as u32, vec![p as u32])),
                    }
                }
            }
        }
        m
    }

    fn build(docs: &[Document]) -> (Arc<IndexSchema>, Vec<u8>) {
        let schema = Arc::new(products());
        let mut b = SegmentBuffer::new(schema.clone());
        for (i, d) in docs.iter().enumerate() {
            b.add(d, 1000 + i as u64).unwrap();
        }
        let bytes = b.seal(7).unwrap();
        assert_eq!(b.postings_passes(), 1);
        (schema, bytes)
    }

    #[test]
    fn tokenizer_rule() {
        assert_eq!(tokenize("red Red shoe"), vec!["red", "red", "shoe"]);
        assert_eq!(tokenize("  Über--straße, 42x!"), vec!["über", "straße", "42x"]);
        assert!(tokenize("--- ...").is_empty());
    }

    #[test]
    fn key_convention() {
        assert_eq!(segment_key(3, 42), "shards/3/segments/00000000000000000042.sseg");
        assert_eq!(parse_segment_key(&segment_key(3, 42)), Some((3, 42)));
        assert_eq!(parse_segment_key("shards/x/segments/1.sseg"), None);
    }

    #[test]
    fn add_assigns_ids_and_positions() {
        let (schema, bytes) = build(&[
            doc(&[("id", s("p1")), ("title", s("red Red shoe"))]),
            doc(&[("id", s("p2")), ("title", s(""))]),
        ]);
        let v = SegmentView::open(&bytes, schema).unwrap();
        assert_eq!(v.doc_count(), 2);
        let red = v.lookup("title", "red").unwrap().unwrap();
        assert_eq!(red.entries().map(|(d, tf, p)| (d, tf, p.to_vec())).collect::<Vec<_>>(), vec![(0, 2, vec![0, 1])]);
        let shoe = v.lookup("title", "shoe").unwrap().unwrap();
        assert_eq!(shoe.entries().map(|(d, tf, p)| (d, tf, p.to_vec())).collect::<Vec<_>>(), vec![(0, 1, vec![2])]);
        assert!(v.lookup("title", "boot").unwrap().is_none());
        assert_eq!(v.field_lengths(1).unwrap(), &[3, 0]);
        assert_eq!(v.keys(), vec!["p1", "p2"]);
        assert!(matches!(v.lookup("price", "1"), Err(SegmentError::NonIndexedField(_))));
        assert!(matches!(v.lookup("ghost", "1"), Err(SegmentError::Schema(_))));
        // keyword primary key is indexed as a single exact term
        assert_eq!(v.lookup("id", "p2").unwrap().unwrap().docs.iter().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn seal_rules() {
        let schema = Arc::new(products());
        let mut b = SegmentBuffer::new(schema.clone());
        assert!(matches!(b.seal(1), Err(SegmentError::Empty)));
        assert_eq!(b.add(&doc(&[("id", s("a"))]), 0).unwrap(), 0);
        assert_eq!(b.add(&doc(&[("id", s("b"))]), 0).unwrap(), 1);
        let bytes = b.seal(1).unwrap();
        assert_eq!(SegmentView::open(&bytes, schema).unwrap().doc_count(), 2);
        assert!(matches!(b.seal(1), Err(SegmentError::Consumed)));
        assert!(matches!(b.add(&doc(&[("id", s("c"))]), 0), Err(SegmentError::Consumed)));
    }

    #[test]
    fn schema_violations_rejected() {
        let mut b = SegmentBuffer::new(Arc::new(products()));
        assert!(matches!(b.add(&doc(&[("title", s("no key"))]), 0), Err(SegmentError::Schema(_))));
        assert!(matches!(b.add(&doc(&[("id", s("k")), ("price", s("x"))]), 0), Err(SegmentError::Schema(_))));
        assert_eq!(b.doc_count(), 0);
    }

    #[test]
    fn footprint_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut b = SegmentBuffer::new(Arc::new(products()));
        let mut last = b.footprint();
        for i in 0..200 {
            b.add(&random_doc(&mut rng, &format!("k{i}")), 0).unwrap();
            assert!(b.footprint() >= last);
            last = b.footprint();
        }
    }

    #[test]
    fn bad_magic_and_bit_flips() {
        let (schema, bytes) = build(&[doc(&[("id", s("p1")), ("title", s("red shoe")), ("price", Value::Float(3.0))])]);
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(SegmentView::open(&wrong, schema.clone()), Err(SegmentError::BadMagic)));
        for byte in 4..bytes.len() {
            for bit in 0..8 {
                let mut c = bytes.clone();
                c[byte] ^= 1 << bit;
                assert!(
                    matches!(SegmentView::open(&c, schema.clone()), Err(SegmentError::ChecksumMismatch { .. })),
                    "flip at {byte}:{bit} not detected"
                );
            }
        }
        assert!(SegmentView::open(&bytes[..bytes.len() - 1], schema).is_err());
    }

    #[test]
    fn unsupported_version() {
        let (schema, mut bytes) = build(&[doc(&[("id", s("p1"))])]);
        bytes[4] = 9;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(SegmentView::open(&bytes, schema), Err(SegmentError::UnsupportedVersion(9))));
    }

    fn check_round_trip(docs: &[Document]) {
        let (schema, bytes) = build(docs);
        let v = SegmentView::open(&bytes, schema.clone()).unwrap();
        assert_eq!(v.segment_id(), 7);
        assert_eq!(v.doc_count() as usize, docs.len());
        let oracle = naive_postings(&schema, docs);
        assert_eq!(v.terms().len(), oracle.len());
        for ((fid, term), list) in &oracle {
            let got = v.lookup_id(*fid, term).expect("term present");
            let got: Vec<(u32, Vec<u32>)> = got.entries().map(|(d, tf, p)| {
                assert_eq!(tf as usize, p.len());
                (d, p.to_vec())
            }).collect();
            assert_eq!(&got, list);
        }
        for (i, d) in docs.iter().enumerate() {
            assert_eq!(v.stored()[i].doc, *d);
            assert_eq!(v.stored()[i].ts_ms, 1000 + i as u64);
            for (fid, f) in schema.fields.iter().enumerate() {
                if f.kind.is_scalar() {
                    let got = v.column(fid as FieldId).unwrap().value(i as u32);
                    let want = d.get(&f.name).cloned();
                    assert_eq!(got, want, "doc value {} of doc {i}", f.name);
                } else {
                    let want = d.get(&f.name).and_then(Value::as_str).map(|t| tokenize(t).len()).unwrap_or(0);
                    assert_eq!(v.field_lengths(fid as FieldId).unwrap()[i] as usize, want);
                }
            }
        }
    }

    #[test]
    fn round_trip_200_random_docs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let docs: Vec<Document> = (0..200).map(|i| random_doc(&mut rng, &format!("k{i:04}"))).collect();
        check_round_trip(&docs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_random_corpora(seed in any::<u64>(), n in 1usize..150) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let docs: Vec<Document> = (0..n).map(|i| random_doc(&mut rng, &format!("k{}", i % 97))).collect();
            check_round_trip(&docs);
        }
    }
}
