//! Compressed document-id sets.
//!
//! A [`DocIdSet`] splits each 32-bit ordinal into a 16-bit chunk key and a
//! 16-bit low part. Every chunk holds one container over the low parts, and
//! the container representation is picked per chunk by [`choose_kind`]:
//!
//! - array: sorted `u16` values, at most 4096 of them
//! - bitmap: 65536 bits
//! - run: sorted, disjoint, non-adjacent `(start, length - 1)` intervals
//!
//! Every operation returns a set whose containers are in their chosen kind.

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

/// Largest cardinality an array container may hold.
pub const ARRAY_MAX: usize = 4096;
const BITMAP_WORDS: usize = 1024;
const BITMAP_BYTES: usize = BITMAP_WORDS * 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("corrupt doc-id set payload at offset {offset}: {reason}")]
    Corrupt { offset: usize, reason: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ContainerKind {
    Array = 0,
    Bitmap = 1,
    Run = 2,
}

/// Picks the cheapest container for a chunk from its cardinality and number
/// of runs, comparing serialized byte sizes.
pub fn choose_kind(cardinality: usize, run_count: usize) -> ContainerKind {
    debug_assert!(run_count <= cardinality);
    let run_bytes = 4 * run_count + 4;
    let array_bytes = 2 * cardinality;
    if run_bytes < array_bytes.min(BITMAP_BYTES) {
        ContainerKind::Run
    } else if cardinality <= ARRAY_MAX {
        ContainerKind::Array
    } else {
        ContainerKind::Bitmap
    }
}

type Words = Box<[u64; BITMAP_WORDS]>;

#[derive(Clone, PartialEq, Eq)]
enum Container {
    Array(Vec<u16>),
    Bitmap(Words, u32),
    Run(Vec<(u16, u16)>),
}

fn empty_words() -> Words {
    Box::new([0u64; BITMAP_WORDS])
}

fn words_cardinality(words: &[u64; BITMAP_WORDS]) -> u32 {
    words.iter().map(|w| w.count_ones()).sum()
}

fn words_run_count(words: &[u64; BITMAP_WORDS]) -> usize {
    let mut carry = 0u64;
    let mut runs = 0usize;
    for &w in words.iter() {
        let starts = w & !((w << 1) | carry);
        runs += starts.count_ones() as usize;
        carry = w >> 63;
    }
    runs
}

fn array_run_count(values: &[u16]) -> usize {
    if values.is_empty() {
        return 0;
    }
    1 + values
        .windows(2)
        .filter(|w| w[1] as u32 != w[0] as u32 + 1)
        .count()
}

fn runs_from_sorted(values: &[u16]) -> Vec<(u16, u16)> {
    let mut runs: Vec<(u16, u16)> = Vec::new();
    for &v in values {
        match runs.last_mut() {
            Some((start, len)) if (*start as u32 + *len as u32 + 1) == v as u32 => *len += 1,
            _ => runs.push((v, 0)),
        }
    }
    runs
}

fn runs_from_words(words: &[u64; BITMAP_WORDS]) -> Vec<(u16, u16)> {
    let mut runs: Vec<(u16, u16)> = Vec::new();
    let mut current: Option<(u32, u32)> = None;
    for (wi, &w) in words.iter().enumerate() {
        if w == 0 {
            if let Some((s, e)) = current.take() {
                runs.push((s as u16, (e - s) as u16));
            }
            continue;
        }
        if w == u64::MAX {
            let base = (wi * 64) as u32;
            current = match current {
                Some((s, e)) if e + 1 == base => Some((s, base + 63)),
                Some((s, e)) => {
                    runs.push((s as u16, (e - s) as u16));
                    Some((base, base + 63))
                }
                None => Some((base, base + 63)),
            };
            continue;
        }
        let mut bits = w;
        while bits != 0 {
            let v = (wi * 64) as u32 + bits.trailing_zeros();
            bits &= bits - 1;
            current = match current {
                Some((s, e)) if e + 1 == v => Some((s, v)),
                Some((s, e)) => {
                    runs.push((s as u16, (e - s) as u16));
                    Some((v, v))
                }
                None => Some((v, v)),
            };
        }
    }
    if let Some((s, e)) = current {
        runs.push((s as u16, (e - s) as u16));
    }
    runs
}

fn set_range(words: &mut [u64; BITMAP_WORDS], start: u32, end_inclusive: u32) {
    let (mut lo, hi) = (start, end_inclusive);
    while lo <= hi {
        let wi = (lo / 64) as usize;
        let bit = lo % 64;
        let last_in_word = (lo | 63).min(hi);
        let width = last_in_word - lo + 1;
        let mask = if width == 64 {
            u64::MAX
        } else {
            ((1u64 << width) - 1) << bit
        };
        words[wi] |= mask;
        lo = last_in_word + 1;
    }
}

impl Container {
    fn kind(&self) -> ContainerKind {
        match self {
            Container::Array(_) => ContainerKind::Array,
            Container::Bitmap(..) => ContainerKind::Bitmap,
            Container::Run(_) => ContainerKind::Run,
        }
    }

    fn cardinality(&self) -> usize {
        match self {
            Container::Array(v) => v.len(),
            Container::Bitmap(_, c) => *c as usize,
            Container::Run(r) => r.iter().map(|&(_, l)| l as usize + 1).sum(),
        }
    }

    fn run_count(&self) -> usize {
        match self {
            Container::Array(v) => array_run_count(v),
            Container::Bitmap(w, _) => words_run_count(w),
            Container::Run(r) => r.len(),
        }
    }

    fn contains(&self, v: u16) -> bool {
        match self {
            Container::Array(a) => a.binary_search(&v).is_ok(),
            Container::Bitmap(w, _) => w[(v / 64) as usize] >> (v % 64) & 1 == 1,
            Container::Run(r) => {
                let idx = r.partition_point(|&(s, _)| s <= v);
                idx > 0 && {
                    let (s, l) = r[idx - 1];
                    (v as u32) <= s as u32 + l as u32
                }
            }
        }
    }

    fn to_sorted(&self) -> Vec<u16> {
        match self {
            Container::Array(a) => a.clone(),
            _ => ContainerIter::new(self).collect(),
        }
    }

    fn to_words(&self) -> Words {
        match self {
            Container::Bitmap(w, _) => w.clone(),
            Container::Array(a) => {
                let mut w = empty_words();
                for &v in a {
                    w[(v / 64) as usize] |= 1u64 << (v % 64);
                }
                w
            }
            Container::Run(r) => {
                let mut w = empty_words();
                for &(s, l) in r {
                    set_range(&mut w, s as u32, s as u32 + l as u32);
                }
                w
            }
        }
    }

    fn from_sorted(values: Vec<u16>) -> Option<Container> {
        if values.is_empty() {
            return None;
        }
        let card = values.len();
        let runs = array_run_count(&values);
        Some(match choose_kind(card, runs) {
            ContainerKind::Array => Container::Array(values),
            ContainerKind::Run => Container::Run(runs_from_sorted(&values)),
            ContainerKind::Bitmap => {
                let w = Container::Array(values).to_words();
                Container::Bitmap(w, card as u32)
            }
        })
    }

    fn from_words(words: Words) -> Option<Container> {
        let card = words_cardinality(&words) as usize;
        if card == 0 {
            return None;
        }
        let runs = words_run_count(&words);
        Some(match choose_kind(card, runs) {
            ContainerKind::Bitmap => Container::Bitmap(words, card as u32),
            ContainerKind::Run => Container::Run(runs_from_words(&words)),
            ContainerKind::Array => {
                Container::Array(ContainerIter::new(&Container::Bitmap(words, card as u32)).collect())
            }
        })
    }

    /// Converts to the kind [`choose_kind`] prescribes; `None` when empty.
    fn normalized(self) -> Option<Container> {
        let card = self.cardinality();
        if card == 0 {
            return None;
        }
        let target = choose_kind(card, self.run_count());
        if target == self.kind() {
            return Some(self);
        }
        Some(match target {
            ContainerKind::Array => Container::Array(self.to_sorted()),
            ContainerKind::Bitmap => Container::Bitmap(self.to_words(), card as u32),
            ContainerKind::Run => match &self {
                Container::Array(a) => Container::Run(runs_from_sorted(a)),
                Container::Bitmap(w, _) => Container::Run(runs_from_words(w)),
                Container::Run(_) => unreachable!(),
            },
        })
    }

    fn with_kind(self, kind: ContainerKind) -> Container {
        let card = self.cardinality();
        match kind {
            ContainerKind::Array => Container::Array(self.to_sorted()),
            ContainerKind::Bitmap => Container::Bitmap(self.to_words(), card as u32),
            ContainerKind::Run => Container::Run(runs_from_sorted(&self.to_sorted())),
        }
    }

    /// Inserts `v`; returns whether it was absent.
    fn insert(&mut self, v: u16) -> bool {
        match self {
            Container::Array(a) => match a.binary_search(&v) {
                Ok(_) => false,
                Err(pos) => {
                    a.insert(pos, v);
                    true
                }
            },
            Container::Bitmap(w, c) => {
                let (wi, bit) = ((v / 64) as usize, v % 64);
                let before = w[wi];
                w[wi] |= 1u64 << bit;
                let added = before != w[wi];
                *c += added as u32;
                added
            }
            Container::Run(r) => {
                let idx = r.partition_point(|&(s, _)| s <= v);
                let v32 = v as u32;
                if idx > 0 {
                    let (s, l) = r[idx - 1];
                    let end = s as u32 + l as u32;
                    if v32 <= end {
                        return false;
                    }
                    if v32 == end + 1 {
                        r[idx - 1].1 += 1;
                        // may now touch the following run
                        if idx < r.len() && r[idx].0 as u32 == v32 + 1 {
                            let (_, nl) = r.remove(idx);
                            r[idx - 1].1 += nl + 1;
                        }
                        return true;
                    }
                }
                if idx < r.len() && r[idx].0 as u32 == v32 + 1 {
                    r[idx].0 = v;
                    r[idx].1 += 1;
                    return true;
                }
                r.insert(idx, (v, 0));
                true
            }
        }
    }

    /// Removes `v`; returns whether it was present.
    fn remove(&mut self, v: u16) -> bool {
        match self {
            Container::Array(a) => match a.binary_search(&v) {
                Ok(pos) => {
                    a.remove(pos);
                    true
                }
                Err(_) => false,
            },
            Container::Bitmap(w, c) => {
                let (wi, bit) = ((v / 64) as usize, v % 64);
                let before = w[wi];
                w[wi] &= !(1u64 << bit);
                let removed = before != w[wi];
                *c -= removed as u32;
                removed
            }
            Container::Run(r) => {
                let idx = r.partition_point(|&(s, _)| s <= v);
                if idx == 0 {
                    return false;
                }
                let (s, l) = r[idx - 1];
                let (s32, end, v32) = (s as u32, s as u32 + l as u32, v as u32);
                if v32 > end {
                    return false;
                }
                match (v32 == s32, v32 == end) {
                    (true, true) => {
                        r.remove(idx - 1);
                    }
                    (true, false) => r[idx - 1] = (v + 1, l - 1),
                    (false, true) => r[idx - 1].1 -= 1,
                    (false, false) => {
                        r[idx - 1].1 = (v32 - s32 - 1) as u16;
                        r.insert(idx, (v + 1, (end - v32 - 1) as u16));
                    }
                }
                true
            }
        }
    }

    fn heap_bytes(&self) -> usize {
        match self {
            Container::Array(a) => a.capacity() * 2,
            Container::Bitmap(..) => BITMAP_BYTES,
            Container::Run(r) => r.capacity() * 4,
        }
    }
}

fn merge_arrays(a: &[u16], b: &[u16], op: SetOp) -> Vec<u16> {
    let mut out = Vec::with_capacity(match op {
        SetOp::Union => a.len() + b.len(),
        SetOp::Intersect => a.len().min(b.len()),
        SetOp::Difference => a.len(),
    });
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => {
                if op != SetOp::Intersect {
                    out.push(a[i]);
                }
                i += 1;
            }
            Ordering::Greater => {
                if op == SetOp::Union {
                    out.push(b[j]);
                }
                j += 1;
            }
            Ordering::Equal => {
                if op != SetOp::Difference {
                    out.push(a[i]);
                }
                i += 1;
                j += 1;
            }
        }
    }
    if op != SetOp::Intersect {
        out.extend_from_slice(&a[i..]);
    }
    if op == SetOp::Union {
        out.extend_from_slice(&b[j..]);
    }
    out
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum SetOp {
    Intersect,
    Union,
    Difference,
}

fn container_op(a: &Container, b: &Container, op: SetOp) -> Option<Container> {
    match (a, b, op) {
        (Container::Array(x), Container::Array(y), _) => Container::from_sorted(merge_arrays(x, y, op)),
        (Container::Array(x), other, SetOp::Intersect) | (other, Container::Array(x), SetOp::Intersect) => {
            Container::from_sorted(x.iter().copied().filter(|&v| other.contains(v)).collect())
        }
        (Container::Array(x), other, SetOp::Difference) => {
            Container::from_sorted(x.iter().copied().filter(|&v| !other.contains(v)).collect())
        }
        _ => {
            let mut w = a.to_words();
            let o = b.to_words();
            for (x, y) in w.iter_mut().zip(o.iter()) {
                *x = match op {
                    SetOp::Intersect => *x & *y,
                    SetOp::Union => *x | *y,
                    SetOp::Difference => *x & !*y,
                };
            }
            Container::from_words(w)
        }
    }
}

/// A set of 32-bit document ordinals.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct DocIdSet {
    chunks: Vec<(u16, Container)>,
}

impl fmt::Debug for DocIdSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 32 {
            f.debug_set().entries(self.iter()).finish()
        } else {
            write!(f, "DocIdSet(len={}, chunks={})", self.len(), self.chunks.len())
        }
    }
}

#[inline]
fn split(doc: u32) -> (u16, u16) {
    ((doc >> 16) as u16, doc as u16)
}

impl DocIdSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a set from strictly increasing ordinals.
    pub fn from_sorted_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        let mut chunks = Vec::new();
        let mut current: Option<(u16, Vec<u16>)> = None;
        for doc in iter {
            let (hi, lo) = split(doc);
            match &mut current {
                Some((key, vals)) if *key == hi => {
                    debug_assert!(vals.last().is_none_or(|&l| l < lo), "input not strictly increasing");
                    vals.push(lo);
                }
                _ => {
                    if let Some((key, vals)) = current.take() {
                        debug_assert!(key < hi, "input not strictly increasing");
                        chunks.extend(Container::from_sorted(vals).map(|c| (key, c)));
                    }
                    current = Some((hi, vec![lo]));
                }
            }
        }
        if let Some((key, vals)) = current {
            chunks.extend(Container::from_sorted(vals).map(|c| (key, c)));
        }
        DocIdSet { chunks }
    }

    /// `[start, start + len)`.
    pub fn from_range(start: u32, len: u32) -> Self {
        let end = start as u64 + len as u64;
        assert!(end <= 1u64 << 32, "range exceeds ordinal space");
        let mut chunks = Vec::new();
        let mut lo = start as u64;
        while lo < end {
            let key = (lo >> 16) as u16;
            let chunk_end = ((lo >> 16) + 1) << 16;
            let hi = end.min(chunk_end);
            let (s, l) = ((lo & 0xFFFF) as u16, (hi - lo - 1) as u16);
            let c = Container::Run(vec![(s, l)]).normalized().expect("non-empty");
            chunks.push((key, c));
            lo = hi;
        }
        DocIdSet { chunks }
    }

    fn chunk_index(&self, key: u16) -> Result<usize, usize> {
        self.chunks.binary_search_by_key(&key, |(k, _)| *k)
    }

    /// Inserts `doc`; returns whether it was absent.
    pub fn add(&mut self, doc: u32) -> bool {
        let (hi, lo) = split(doc);
        match self.chunk_index(hi) {
            Ok(i) => {
                let (key, c) = std::mem::replace(&mut self.chunks[i], (hi, Container::Array(Vec::new())));
                let mut c = c;
                let added = c.insert(lo);
                self.chunks[i] = (key, c.normalized().expect("non-empty after insert"));
                added
            }
            Err(i) => {
                self.chunks.insert(i, (hi, Container::Array(vec![lo])));
                true
            }
        }
    }

    /// Removes `doc`; returns whether it was present.
    pub fn remove(&mut self, doc: u32) -> bool {
        let (hi, lo) = split(doc);
        let Ok(i) = self.chunk_index(hi) else {
            return false;
        };
        let (key, mut c) = self.chunks.remove(i);
        let removed = c.remove(lo);
        if let Some(c) = c.normalized() {
            self.chunks.insert(i, (key, c));
        }
        removed
    }

    pub fn contains(&self, doc: u32) -> bool {
        let (hi, lo) = split(doc);
        self.chunk_index(hi)
            .map(|i| self.chunks[i].1.contains(lo))
            .unwrap_or(false)
    }

    pub fn len(&self) -> u64 {
        self.chunks.iter().map(|(_, c)| c.cardinality() as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn iter(&self) -> Iter<'_> {
        Iter {
            chunks: self.chunks.iter(),
            current: None,
        }
    }

    /// Kind of each chunk's container, in key order.
    pub fn container_kinds(&self) -> Vec<(u16, ContainerKind)> {
        self.chunks.iter().map(|(k, c)| (*k, c.kind())).collect()
    }

    /// Same membership, every container forced to `kind` regardless of cost.
    /// Used to check that results never depend on representation.
    pub fn with_forced_kind(&self, kind: ContainerKind) -> DocIdSet {
        DocIdSet {
            chunks: self
                .chunks
                .iter()
                .map(|(k, c)| (*k, c.clone().with_kind(kind)))
                .collect(),
        }
    }

    fn binary_op(&self, other: &DocIdSet, op: SetOp) -> DocIdSet {
        let (a, b) = (&self.chunks, &other.chunks);
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                Ordering::Less => {
                    if op != SetOp::Intersect {
                        out.push((a[i].0, a[i].1.clone().normalized().expect("non-empty")));
                    }
                    i += 1;
                }
                Ordering::Greater => {
                    if op == SetOp::Union {
                        out.push((b[j].0, b[j].1.clone().normalized().expect("non-empty")));
                    }
                    j += 1;
                }
                Ordering::Equal => {
                    if let Some(c) = container_op(&a[i].1, &b[j].1, op) {
                        out.push((a[i].0, c));
                    }
                    i += 1;
                    j += 1;
                }
            }
        }
        if op != SetOp::Intersect {
            out.extend(a[i..].iter().map(|(k, c)| (*k, c.clone().normalized().expect("non-empty"))));
        }
        if op == SetOp::Union {
            out.extend(b[j..].iter().map(|(k, c)| (*k, c.clone().normalized().expect("non-empty"))));
        }
        DocIdSet { chunks: out }
    }

    pub fn intersect(&self, other: &DocIdSet) -> DocIdSet {
        self.binary_op(other, SetOp::Intersect)
    }

    pub fn union(&self, other: &DocIdSet) -> DocIdSet {
        self.binary_op(other, SetOp::Union)
    }

    pub fn difference(&self, other: &DocIdSet) -> DocIdSet {
        self.binary_op(other, SetOp::Difference)
    }

    /// Approximate heap usage in bytes.
    pub fn heap_bytes(&self) -> usize {
        self.chunks.capacity() * std::mem::size_of::<(u16, Container)>()
            + self.chunks.iter().map(|(_, c)| c.heap_bytes()).sum::<usize>()
    }

    /// Serialized size in bytes.
    pub fn serialized_len(&self) -> usize {
        4 + self
            .chunks
            .iter()
            .map(|(_, c)| {
                5 + match c {
                    Container::Array(a) => 2 * a.len(),
                    Container::Bitmap(..) => BITMAP_BYTES,
                    Container::Run(r) => 2 + 4 * r.len(),
                }
            })
            .sum::<usize>()
    }

    /// Appends the little-endian serialized form to `out`.
    pub fn serialize_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.serialized_len());
        out.extend_from_slice(&(self.chunks.len() as u32).to_le_bytes());
        for (key, c) in &self.chunks {
            out.extend_from_slice(&key.to_le_bytes());
            out.push(c.kind() as u8);
            out.extend_from_slice(&((c.cardinality() - 1) as u16).to_le_bytes());
            match c {
                Container::Array(a) => {
                    for v in a {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Container::Bitmap(w, _) => {
                    for word in w.iter() {
                        out.extend_from_slice(&word.to_le_bytes());
                    }
                }
                Container::Run(r) => {
                    out.extend_from_slice(&(r.len() as u16).to_le_bytes());
                    for (s, l) in r {
                        out.extend_from_slice(&s.to_le_bytes());
                        out.extend_from_slice(&l.to_le_bytes());
                    }
                }
            }
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.serialize_into(&mut out);
        out
    }

    /// Parses a serialized set at the start of `bytes`, returning it and the
    /// number of bytes consumed. Trailing bytes are left alone.
    pub fn deserialize_prefix(bytes: &[u8]) -> Result<(DocIdSet, usize), CodecError> {
        let mut r = Reader { bytes, pos: 0 };
        let n = r.u32()? as usize;
        let mut chunks: Vec<(u16, Container)> = Vec::with_capacity(n.min(65536));
        for _ in 0..n {
            let at = r.pos;
            let key = r.u16()?;
            if chunks.last().is_some_and(|(k, _)| *k >= key) {
                return Err(CodecError::Corrupt { offset: at, reason: "chunk keys not increasing" });
            }
            let kind_at = r.pos;
            let kind = r.u8()?;
            let card = r.u16()? as usize + 1;
            let c = match kind {
                0 => {
                    if card > ARRAY_MAX {
                        return Err(CodecError::Corrupt { offset: kind_at, reason: "array container too large" });
                    }
                    let start = r.pos;
                    let mut vals = Vec::with_capacity(card);
                    for _ in 0..card {
                        vals.push(r.u16()?);
                    }
                    if vals.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(CodecError::Corrupt { offset: start, reason: "array not strictly increasing" });
                    }
                    Container::Array(vals)
                }
                1 => {
                    let start = r.pos;
                    let mut w = empty_words();
                    for word in w.iter_mut() {
                        *word = r.u64()?;
                    }
                    if words_cardinality(&w) as usize != card {
                        return Err(CodecError::Corrupt { offset: start, reason: "bitmap cardinality mismatch" });
                    }
                    Container::Bitmap(w, card as u32)
                }
                2 => {
                    let nruns = r.u16()? as usize;
                    let start = r.pos;
                    let mut runs = Vec::with_capacity(nruns);
                    let mut prev_end: Option<u32> = None;
                    for _ in 0..nruns {
                        let s = r.u16()?;
                        let l = r.u16()?;
                        let end = s as u32 + l as u32;
                        if end > 0xFFFF || prev_end.is_some_and(|p| s as u32 <= p + 1) {
                            return Err(CodecError::Corrupt { offset: start, reason: "runs overlap or touch" });
                        }
                        prev_end = Some(end);
                        runs.push((s, l));
                    }
                    let c = Container::Run(runs);
                    if c.cardinality() != card || nruns == 0 {
                        return Err(CodecError::Corrupt { offset: start, reason: "run cardinality mismatch" });
                    }
                    c
                }
                _ => return Err(CodecError::Corrupt { offset: kind_at, reason: "unknown container kind" }),
            };
            chunks.push((key, c));
        }
        Ok((DocIdSet { chunks }, r.pos))
    }

    pub fn deserialize(bytes: &[u8]) -> Result<DocIdSet, CodecError> {
        let (set, used) = Self::deserialize_prefix(bytes)?;
        if used != bytes.len() {
            return Err(CodecError::Corrupt { offset: used, reason: "trailing bytes" });
        }
        Ok(set)
    }
}

impl FromIterator<u32> for DocIdSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        let mut v: Vec<u32> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        DocIdSet::from_sorted_iter(v)
    }
}

impl<'a> IntoIterator for &'a DocIdSet {
    type Item = u32;
    type IntoIter = Iter<'a>;
    fn into_iter(self) -> Iter<'a> {
        self.iter()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CodecError> {
        if self.bytes.len() - self.pos < n {
            return Err(CodecError::Corrupt { offset: self.pos, reason: "truncated" });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, CodecError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

enum ContainerIter<'a> {
    Array(std::slice::Iter<'a, u16>),
    Bitmap { words: &'a [u64; BITMAP_WORDS], idx: usize, cur: u64 },
    Run { runs: std::slice::Iter<'a, (u16, u16)>, next: u32, end: u32 },
}

impl<'a> ContainerIter<'a> {
    fn new(c: &'a Container) -> Self {
        match c {
            Container::Array(a) => ContainerIter::Array(a.iter()),
            Container::Bitmap(w, _) => ContainerIter::Bitmap { words: w, idx: 0, cur: w[0] },
            Container::Run(r) => ContainerIter::Run { runs: r.iter(), next: 1, end: 0 },
        }
    }
}

impl Iterator for ContainerIter<'_> {
    type Item = u16;
    fn next(&mut self) -> Option<u16> {
        match self {
            ContainerIter::Array(it) => it.next().copied(),
            ContainerIter::Bitmap { words, idx, cur } => loop {
                if *cur != 0 {
                    let v = (*idx * 64) as u32 + cur.trailing_zeros();
                    *cur &= *cur - 1;
                    return Some(v as u16);
                }
                *idx += 1;
                if *idx >= BITMAP_WORDS {
                    return None;
                }
                *cur = words[*idx];
            },
            ContainerIter::Run { runs, next, end } => {
                if *next > *end {
                    let &(s, l) = runs.next()?;
                    *next = s as u32;
                    *end = s as u32 + l as u32;
                }
                let v = *next;
                *next += 1;
                Some(v as u16)
            }
        }
    }
}

/// Iterator over a [`DocIdSet`] in strictly increasing order.
pub struct Iter<'a> {
    chunks: std::slice::Iter<'a, (u16, Container)>,
    current: Option<(u32, ContainerIter<'a>)>,
}

impl Iterator for Iter<'_> {
    type Item = u32;
    fn next(&mut self) -> Option<u32> {
        loop {
            if let Some((high, it)) = &mut self.current {
                if let Some(lo) = it.next() {
                    return Some(*high | lo as u32);
                }
            }
            let (key, c) = self.chunks.next()?;
            self.current = Some(((*key as u32) << 16, ContainerIter::new(c)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn set(v: &[u32]) -> DocIdSet {
        v.iter().copied().collect()
    }

    fn check_invariants(s: &DocIdSet) {
        for w in s.chunks.windows(2) {
            assert!(w[0].0 < w[1].0);
        }
        for (_, c) in &s.chunks {
            let card = c.cardinality();
            assert!(card > 0);
            assert_eq!(c.kind(), choose_kind(card, c.run_count()));
            if let Container::Array(a) = c {
                assert!(a.len() <= ARRAY_MAX);
            }
            if let Container::Run(r) = c {
                for w in r.windows(2) {
                    assert!(w[0].0 as u32 + w[0].1 as u32 + 1 < w[1].0 as u32);
                }
            }
        }
        let v: Vec<u32> = s.iter().collect();
        assert!(v.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(v.len() as u64, s.len());
    }

    #[test]
    fn choose_kind_examples() {
        assert_eq!(choose_kind(10, 10), ContainerKind::Array);
        assert_eq!(choose_kind(65536, 1), ContainerKind::Run);
        assert_eq!(choose_kind(30000, 15000), ContainerKind::Bitmap);
    }

    #[test]
    fn add_to_empty_is_array() {
        let mut s = DocIdSet::new();
        assert!(s.add(7));
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![7]);
        assert_eq!(s.container_kinds(), vec![(0, ContainerKind::Array)]);
        assert!(!s.add(7));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn promotes_array_to_bitmap_past_4096() {
        // even values only so runs never pay off
        let mut s = DocIdSet::new();
        for i in 0..4096u32 {
            s.add(i * 2);
        }
        assert_eq!(s.container_kinds(), vec![(0, ContainerKind::Array)]);
        s.add(2 * 4096);
        assert_eq!(s.len(), 4097);
        assert_eq!(s.container_kinds(), vec![(0, ContainerKind::Bitmap)]);
        s.remove(0);
        assert_eq!(s.container_kinds(), vec![(0, ContainerKind::Array)]);
        check_invariants(&s);
    }

    #[test]
    fn dense_range_is_run() {
        let s = DocIdSet::from_range(0, 65536);
        assert_eq!(s.container_kinds(), vec![(0, ContainerKind::Run)]);
        assert_eq!(s.len(), 65536);
        let s = DocIdSet::from_range(65530, 20);
        assert_eq!(s.iter().collect::<Vec<_>>(), (65530..65550).collect::<Vec<_>>());
        check_invariants(&s);
    }

    #[test]
    fn basic_set_algebra() {
        let a = set(&[1, 2, 3]);
        let b = set(&[2, 3, 4]);
        assert_eq!(a.intersect(&b), set(&[2, 3]));
        assert_eq!(a.union(&b), set(&[1, 2, 3, 4]));
        assert_eq!(a.difference(&b), set(&[1]));
        assert_eq!(a.union(&DocIdSet::new()), a);
    }

    #[test]
    fn run_container_insert_and_remove() {
        let mut s = DocIdSet::from_range(100, 50).with_forced_kind(ContainerKind::Run);
        s.add(150);
        s.add(99);
        s.add(10);
        s.remove(120);
        let mut expected: BTreeSet<u32> = (99..=150).collect();
        expected.insert(10);
        expected.remove(&120);
        assert_eq!(s.iter().collect::<BTreeSet<_>>(), expected);
        check_invariants(&s);
    }

    #[test]
    fn empty_serializes_to_header() {
        let bytes = DocIdSet::new().serialize();
        assert_eq!(bytes, vec![0, 0, 0, 0]);
        assert_eq!(DocIdSet::deserialize(&bytes).unwrap(), DocIdSet::new());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let s: DocIdSet = (0..100u32).map(|i| i * 3).collect();
        let bytes = s.serialize();
        for cut in [1, 4, 7, bytes.len() - 1] {
            assert!(matches!(
                DocIdSet::deserialize(&bytes[..cut]),
                Err(CodecError::Corrupt { .. })
            ));
        }
    }

    #[test]
    fn serialized_len_matches() {
        let s: DocIdSet = (0..200_000u32).filter(|i| i % 7 != 0 || *i > 150_000).collect();
        assert_eq!(s.serialize().len(), s.serialized_len());
    }

    fn arb_set() -> impl Strategy<Value = BTreeSet<u32>> {
        prop_oneof![
            proptest::collection::btree_set(0u32..200_000, 0..3000),
            (0u32..3, 0.001f64..0.9).prop_map(|(hi, density)| {
                // dense chunk with a deterministic pattern
                let step = (1.0 / density).max(1.0) as u32;
                (0..65536u32).step_by(step as usize).map(|v| (hi << 16) | v).collect()
            }),
            (0u32..100_000, 1u32..70_000).prop_map(|(s, l)| (s..s + l).collect()),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ops_match_btreeset(a in arb_set(), b in arb_set()) {
            let sa: DocIdSet = a.iter().copied().collect();
            let sb: DocIdSet = b.iter().copied().collect();
            let i = sa.intersect(&sb);
            let u = sa.union(&sb);
            let d = sa.difference(&sb);
            prop_assert_eq!(i.iter().collect::<BTreeSet<_>>(), a.intersection(&b).copied().collect::<BTreeSet<_>>());
            prop_assert_eq!(u.iter().collect::<BTreeSet<_>>(), a.union(&b).copied().collect::<BTreeSet<_>>());
            prop_assert_eq!(d.iter().collect::<BTreeSet<_>>(), a.difference(&b).copied().collect::<BTreeSet<_>>());
            prop_assert!(i.len() <= sa.len().min(sb.len()));
            prop_assert_eq!(u.len() + i.len(), sa.len() + sb.len());
            for s in [&i, &u, &d] {
                check_invariants(s);
            }
            prop_assert_eq!(DocIdSet::deserialize(&u.serialize()).unwrap(), u);
        }

        #[test]
        fn representation_does_not_change_membership(a in arb_set(), b in arb_set()) {
            let sa: DocIdSet = a.iter().copied().collect();
            let sb: DocIdSet = b.iter().copied().collect();
            let reference = (sa.intersect(&sb), sa.union(&sb), sa.difference(&sb));
            for ka in [ContainerKind::Array, ContainerKind::Bitmap, ContainerKind::Run] {
                for kb in [ContainerKind::Array, ContainerKind::Bitmap, ContainerKind::Run] {
                    let fa = sa.with_forced_kind(ka);
                    let fb = sb.with_forced_kind(kb);
                    prop_assert_eq!(fa.iter().collect::<Vec<_>>(), sa.iter().collect::<Vec<_>>());
                    prop_assert_eq!(&fa.intersect(&fb), &reference.0);
                    prop_assert_eq!(&fa.union(&fb), &reference.1);
                    prop_assert_eq!(&fa.difference(&fb), &reference.2);
                }
            }
        }

        #[test]
        fn add_remove_match_btreeset(ops in proptest::collection::vec((any::<bool>(), 0u32..140_000), 0..2000)) {
            let mut s = DocIdSet::new();
            let mut oracle = BTreeSet::new();
            for (insert, v) in ops {
                if insert {
                    prop_assert_eq!(s.add(v), oracle.insert(v));
                } else {
                    prop_assert_eq!(s.remove(v), oracle.remove(&v));
                }
            }
            check_invariants(&s);
            prop_assert_eq!(s.iter().collect::<BTreeSet<_>>(), oracle);
        }
    }
}
