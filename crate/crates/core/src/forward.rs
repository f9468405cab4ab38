//! RAM-resident forward arrays for in-place fields.
//!
//! Each in-place scalar field owns a dense array indexed by doc ordinal.
//! Arrays are chunked and copy-on-write: cloning the store for a read
//! snapshot shares every chunk, and the next write to a shared chunk copies
//! that one chunk only, so a write costs at most `CHUNK` words regardless of
//! the number of documents. Strings are interned in an [`EnumStore`];
//! `fast_search` fields additionally keep an ordered `(value, ordinal)` set
//! for range filtering.

use std::cmp::Ordering;
use std::ops::Bound;
use std::sync::Arc;

use im::{HashMap as ImHashMap, OrdSet, Vector};
use thiserror::Error;

use crate::codec::DocIdSet;
use crate::schema::{FieldId, FieldKind, IndexSchema, SchemaError, UpdatePath, Value};
use crate::segment::{Column, SegmentView};

/// Slots per array chunk.
pub const CHUNK: usize = 1024;

const MISSING_I64_BITS: u64 = i64::MIN as u64;
const MISSING_ENUM_BITS: u64 = u32::MAX as u64;

#[derive(Debug, Error)]
pub enum ForwardError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("field `{0}` is not routed to the in-place path")]
    NotInPlace(String),
    #[error("ordinal {ordinal} beyond allocated space {capacity}")]
    OrdinalOutOfRange { ordinal: u32, capacity: u32 },
    #[error("segment has no doc-values column for `{0}`")]
    MissingColumn(String),
}

/// Dense string dictionary. Ids are assigned from 0 in first-intern order.
#[derive(Debug, Clone, Default)]
pub struct EnumStore {
    ids: ImHashMap<Arc<str>, u32>,
    strings: Vector<Arc<str>>,
    bytes: usize,
}

impl EnumStore {
    pub fn intern(&mut self, s: &str) -> u32 {
        if let Some(&id) = self.ids.get(s) {
            return id;
        }
        let id = self.strings.len() as u32;
        let s: Arc<str> = Arc::from(s);
        self.bytes += s.len();
        self.strings.push_back(s.clone());
        self.ids.insert(s, id);
        id
    }

    pub fn id_of(&self, s: &str) -> Option<u32> {
        self.ids.get(s).copied()
    }

    pub fn resolve(&self, id: u32) -> Option<&str> {
        self.strings.get(id as usize).map(|s| &**s)
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    fn footprint(&self) -> usize {
        self.bytes + self.strings.len() * 32
    }
}

/// Totally ordered key for the fast-search set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
enum SortKey {
    Int(i64),
    Float(u64),
    Str(Arc<str>),
}

fn float_key(f: f64) -> u64 {
    let f = if f == 0.0 { 0.0 } else { f };
    let b = f.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// One end of a range filter. Bounds are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub enum RangeBound {
    Unbounded,
    Included(Value),
}

#[derive(Debug, Clone)]
struct FieldArray {
    kind: FieldKind,
    name: String,
    chunks: Vec<Arc<[u64; CHUNK]>>,
    tree: Option<OrdSet<(SortKey, u32)>>,
}

impl FieldArray {
    fn sentinel(&self) -> u64 {
        match self.kind {
            FieldKind::Int64 => MISSING_I64_BITS,
            FieldKind::Float64 => f64::NAN.to_bits(),
            _ => MISSING_ENUM_BITS,
        }
    }

    fn is_missing(&self, bits: u64) -> bool {
        match self.kind {
            FieldKind::Int64 => bits == MISSING_I64_BITS,
            FieldKind::Float64 => f64::from_bits(bits).is_nan(),
            _ => bits == MISSING_ENUM_BITS,
        }
    }

    fn raw(&self, ordinal: u32) -> u64 {
        let (c, i) = (ordinal as usize / CHUNK, ordinal as usize % CHUNK);
        self.chunks.get(c).map_or(self.sentinel(), |ch| ch[i])
    }

    fn sort_key(&self, bits: u64, enums: &EnumStore) -> Option<SortKey> {
        if self.is_missing(bits) {
            return None;
        }
        Some(match self.kind {
            FieldKind::Int64 => SortKey::Int(bits as i64),
            FieldKind::Float64 => SortKey::Float(float_key(f64::from_bits(bits))),
            _ => SortKey::Str(enums.strings[bits as usize].clone()),
        })
    }
}

/// Forward arrays for every in-place scalar field of a schema.
#[derive(Debug, Clone)]
pub struct ForwardStore {
    fields: Vec<(FieldId, FieldArray)>,
    enums: EnumStore,
    capacity: u32,
    write_ops: u64,
    last_write_ops: u64,
}

impl ForwardStore {
    pub fn new(schema: &IndexSchema) -> Self {
        let fields = schema
            .fields_on(UpdatePath::InPlace)
            .filter(|(_, f)| f.kind.is_scalar())
            .map(|(id, f)| {
                let arr = FieldArray {
                    kind: f.kind,
                    name: f.name.clone(),
                    chunks: Vec::new(),
                    tree: f.fast_search.then(OrdSet::new),
                };
                (id, arr)
            })
            .collect();
        ForwardStore { fields, enums: EnumStore::default(), capacity: 0, write_ops: 0, last_write_ops: 0 }
    }

    /// Number of allocated ordinal slots.
    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn enums(&self) -> &EnumStore {
        &self.enums
    }

    /// Array words touched by all writes so far (slot writes plus chunk copies).
    pub fn write_ops(&self) -> u64 {
        self.write_ops
    }

    /// Array words touched by the most recent `set_value`.
    pub fn last_write_ops(&self) -> u64 {
        self.last_write_ops
    }

    pub fn has_field(&self, field: FieldId) -> bool {
        self.fields.iter().any(|(id, _)| *id == field)
    }

    fn array(&self, schema: &IndexSchema, name: &str) -> Result<(usize, &FieldArray), ForwardError> {
        schema.field(name)?;
        self.fields
            .iter()
            .enumerate()
            .find(|(_, (_, a))| a.name == name)
            .map(|(i, (_, a))| (i, a))
            .ok_or_else(|| ForwardError::NotInPlace(name.to_string()))
    }

    /// Allocates slots so that ordinals below `ordinals` are addressable.
    pub fn grow_to(&mut self, ordinals: u32) {
        if ordinals <= self.capacity {
            return;
        }
        let chunks = (ordinals as usize).div_ceil(CHUNK);
        for (_, arr) in &mut self.fields {
            let s = arr.sentinel();
            while arr.chunks.len() < chunks {
                arr.chunks.push(Arc::new([s; CHUNK]));
            }
        }
        self.capacity = ordinals;
    }

    fn encode(&mut self, idx: usize, value: Option<&Value>) -> u64 {
        let kind = self.fields[idx].1.kind;
        match (kind, value) {
            (_, None) => self.fields[idx].1.sentinel(),
            (FieldKind::Int64, Some(v)) => v.as_i64().expect("validated") as u64,
            (FieldKind::Float64, Some(v)) => v.as_f64().expect("validated").to_bits(),
            (_, Some(v)) => self.enums.intern(v.as_str().expect("validated")) as u64,
        }
    }

    fn write_slot(&mut self, idx: usize, ordinal: u32, bits: u64) -> u64 {
        let old = self.fields[idx].1.raw(ordinal);
        let old_key = self.fields[idx].1.sort_key(old, &self.enums);
        let new_key = self.fields[idx].1.sort_key(bits, &self.enums);
        let arr = &mut self.fields[idx].1;
        let (c, i) = (ordinal as usize / CHUNK, ordinal as usize % CHUNK);
        let mut ops = 1;
        if Arc::strong_count(&arr.chunks[c]) > 1 {
            ops += CHUNK as u64;
        }
        Arc::make_mut(&mut arr.chunks[c])[i] = bits;
        if let Some(tree) = &mut arr.tree {
            if old_key != new_key {
                if let Some(k) = old_key {
                    tree.remove(&(k, ordinal));
                }
                if let Some(k) = new_key {
                    tree.insert((k, ordinal));
                }
            }
        }
        ops
    }

    /// Overwrites one slot. The value must match the field kind.
    pub fn set_value(&mut self, schema: &IndexSchema, field: &str, ordinal: u32, value: &Value) -> Result<(), ForwardError> {
        let (idx, _) = self.array(schema, field)?;
        schema.validate_update(field, value)?;
        if ordinal >= self.capacity {
            return Err(ForwardError::OrdinalOutOfRange { ordinal, capacity: self.capacity });
        }
        let bits = self.encode(idx, Some(value));
        let ops = self.write_slot(idx, ordinal, bits);
        self.last_write_ops = ops;
        self.write_ops += ops;
        Ok(())
    }

    /// Current value of a slot, `None` when missing or never allocated.
    pub fn get_value(&self, schema: &IndexSchema, field: &str, ordinal: u32) -> Result<Option<Value>, ForwardError> {
        let (_, arr) = self.array(schema, field)?;
        Ok(self.decode(arr, arr.raw(ordinal)))
    }

    pub fn get_by_id(&self, field: FieldId, ordinal: u32) -> Option<Value> {
        let (_, arr) = self.fields.iter().find(|(id, _)| *id == field)?;
        self.decode(arr, arr.raw(ordinal))
    }

    fn decode(&self, arr: &FieldArray, bits: u64) -> Option<Value> {
        if arr.is_missing(bits) {
            return None;
        }
        Some(match arr.kind {
            FieldKind::Int64 => Value::Int(bits as i64),
            FieldKind::Float64 => Value::Float(f64::from_bits(bits)),
            _ => Value::Str(self.enums.resolve(bits as u32).expect("interned").to_string()),
        })
    }

    /// Fills `[base, base + doc_count)` from the segment's doc values.
    pub fn init_from_segment(&mut self, view: &SegmentView, base: u32) -> Result<(), ForwardError> {
        let end = base + view.doc_count();
        self.grow_to(end);
        for idx in 0..self.fields.len() {
            let fid = self.fields[idx].0;
            let column = view
                .column(fid)
                .ok_or_else(|| ForwardError::MissingColumn(self.fields[idx].1.name.clone()))?;
            for local in 0..view.doc_count() {
                let bits = match column {
                    Column::I64(v) => v[local as usize] as u64,
                    Column::F64(v) => v[local as usize].to_bits(),
                    Column::Enum { .. } => match column.value(local) {
                        Some(Value::Str(s)) => self.enums.intern(&s) as u64,
                        _ => MISSING_ENUM_BITS,
                    },
                };
                self.write_slot(idx, base + local, bits);
            }
        }
        Ok(())
    }

    fn bound_key(&self, kind: FieldKind, field: &str, b: &RangeBound, upper: bool) -> Result<Bound<SortKey>, ForwardError> {
        let RangeBound::Included(v) = b else {
            return Ok(Bound::Unbounded);
        };
        let mismatch = || SchemaError::TypeMismatch {
            field: field.to_string(),
            expected: kind,
            got: v.type_name(),
        };
        Ok(Bound::Included(match (kind, v) {
            (FieldKind::Int64, Value::Int(i)) => SortKey::Int(*i),
            (FieldKind::Int64, Value::Float(f)) => {
                let r = if upper { f.floor() } else { f.ceil() };
                SortKey::Int(r.clamp(i64::MIN as f64, i64::MAX as f64) as i64)
            }
            (FieldKind::Float64, Value::Int(_) | Value::Float(_)) => SortKey::Float(float_key(v.as_f64().unwrap())),
            (FieldKind::Keyword, Value::Str(s)) => SortKey::Str(Arc::from(s.as_str())),
            _ => return Err(mismatch().into()),
        }))
    }

    fn bounds(&self, schema: &IndexSchema, field: &str, lo: &RangeBound, hi: &RangeBound) -> Result<(usize, Bound<SortKey>, Bound<SortKey>), ForwardError> {
        let (idx, arr) = self.array(schema, field)?;
        let lo = self.bound_key(arr.kind, field, lo, false)?;
        let hi = self.bound_key(arr.kind, field, hi, true)?;
        Ok((idx, lo, hi))
    }

    /// Ordinals whose value lies in `[lo, hi]`. Uses the ordered set when the
    /// field is `fast_search`, a linear scan otherwise. Missing values never
    /// match.
    pub fn range_filter(&self, schema: &IndexSchema, field: &str, lo: &RangeBound, hi: &RangeBound) -> Result<DocIdSet, ForwardError> {
        let (idx, lo_k, hi_k) = self.bounds(schema, field, lo, hi)?;
        match &self.fields[idx].1.tree {
            Some(tree) => Ok(tree_range(tree, lo_k, hi_k)),
            None => Ok(self.scan(idx, &lo_k, &hi_k)),
        }
    }

    /// Linear-scan evaluation of [`ForwardStore::range_filter`].
    pub fn range_scan(&self, schema: &IndexSchema, field: &str, lo: &RangeBound, hi: &RangeBound) -> Result<DocIdSet, ForwardError> {
        let (idx, lo_k, hi_k) = self.bounds(schema, field, lo, hi)?;
        Ok(self.scan(idx, &lo_k, &hi_k))
    }

    fn scan(&self, idx: usize, lo: &Bound<SortKey>, hi: &Bound<SortKey>) -> DocIdSet {
        let arr = &self.fields[idx].1;
        (0..self.capacity)
            .filter(|&o| {
                let Some(k) = arr.sort_key(arr.raw(o), &self.enums) else {
                    return false;
                };
                let above = match lo {
                    Bound::Included(l) => k >= *l,
                    _ => true,
                };
                let below = match hi {
                    Bound::Included(h) => k <= *h,
                    _ => true,
                };
                above && below
            })
            .collect()
    }

    /// Rebuilds every fast-search set from its array and compares it with
    /// the maintained one.
    pub fn trees_coherent(&self) -> bool {
        self.fields.iter().all(|(_, arr)| match &arr.tree {
            None => true,
            Some(tree) => {
                let rebuilt: OrdSet<(SortKey, u32)> = (0..self.capacity)
                    .filter_map(|o| arr.sort_key(arr.raw(o), &self.enums).map(|k| (k, o)))
                    .collect();
                rebuilt == *tree
            }
        })
    }

    /// Accounting bytes: array chunks, dictionary, ordered-set entries.
    pub fn footprint(&self) -> usize {
        let arrays: usize = self
            .fields
            .iter()
            .map(|(_, a)| a.chunks.len() * CHUNK * 8 + a.tree.as_ref().map_or(0, |t| t.len() * 48))
            .sum();
        arrays + self.enums.footprint()
    }
}

fn tree_range(tree: &OrdSet<(SortKey, u32)>, lo: Bound<SortKey>, hi: Bound<SortKey>) -> DocIdSet {
    if let (Bound::Included(l), Bound::Included(h)) = (&lo, &hi) {
        if l.cmp(h) == Ordering::Greater {
            return DocIdSet::new();
        }
    }
    let lo = match lo {
        Bound::Included(k) => Bound::Included((k, 0)),
        _ => Bound::Unbounded,
    };
    let hi = match hi {
        Bound::Included(k) => Bound::Included((k, u32::MAX)),
        _ => Bound::Unbounded,
    };
    let mut ords: Vec<u32> = tree.range((lo, hi)).map(|(_, o)| *o).collect();
    ords.sort_unstable();
    DocIdSet::from_sorted_iter(ords)
}
