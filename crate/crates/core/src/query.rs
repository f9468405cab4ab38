//! Query parsing, boolean retrieval and BM25 ranking.
//!
//! Grammar:
//!
//! ```text
//! query  := and ("OR" and)*
//! and    := atom ("AND" atom)*
//! atom   := "(" query ")" | field ":" term | field ":[" bound "TO" bound "]"
//! bound  := "*" | value
//! ```
//!
//! A term on a text field is tokenized; several tokens become a conjunction.
//! `field:value` on an in-place scalar field is the range `[value TO value]`.
//! Range leaves filter but do not score.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::codec::DocIdSet;
use crate::forward::RangeBound;
use crate::memindex::ReadSnapshot;
use crate::schema::{FieldId, FieldKind, IndexSchema, SchemaError, UpdatePath, Value};
use crate::segment::tokenize;

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("syntax error at byte {pos}: {message}")]
    Syntax { pos: usize, message: String },
    #[error("field `{field}` cannot be used this way: {reason}")]
    FieldMisuse { field: String, reason: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("bm25 domain violation: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Query {
    Term { field: FieldId, term: String },
    And(Vec<Query>),
    Or(Vec<Query>),
    Range { field: String, lo: RangeBound, hi: RangeBound },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub key: String,
    pub ordinal: u32,
    pub score: f64,
}

/// BM25 contribution of one term to one document.
pub fn bm25_score(tf: u32, df: u64, n: u64, doc_len: f64, avg_len: f64) -> Result<f64, QueryError> {
    if df < 1 || df > n {
        return Err(QueryError::Domain(format!("df={df} outside [1, {n}]")));
    }
    if doc_len.is_nan() || doc_len <= 0.0 || avg_len.is_nan() || avg_len <= 0.0 {
        return Err(QueryError::Domain(format!("doc_len={doc_len} avg_len={avg_len}")));
    }
    let idf = (1.0 + (n as f64 - df as f64 + 0.5) / (df as f64 + 0.5)).ln();
    let tf = tf as f64;
    Ok(idf * tf * (K1 + 1.0) / (tf + K1 * (1.0 - B + B * doc_len / avg_len)))
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LParen,
    RParen,
    And,
    Or,
    Clause { field: String, value: ClauseValue },
}

#[derive(Debug, Clone, PartialEq)]
enum ClauseValue {
    Term(String),
    Range(String, String),
}

fn syntax(pos: usize, message: impl Into<String>) -> QueryError {
    QueryError::Syntax { pos, message: message.into() }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, QueryError> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        let c = b[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c == b'(' || c == b')' {
            out.push((i, if c == b'(' { Tok::LParen } else { Tok::RParen }));
            i += 1;
            continue;
        }
        let start = i;
        while i < b.len() && !b[i].is_ascii_whitespace() && b[i] != b'(' && b[i] != b')' && b[i] != b':' {
            i += 1;
        }
        let word = &text[start..i];
        if i >= b.len() || b[i] != b':' {
            match word {
                "AND" => out.push((start, Tok::And)),
                "OR" => out.push((start, Tok::Or)),
                _ => return Err(syntax(start, format!("expected field:value, found `{word}`"))),
            }
            continue;
        }
        if word.is_empty() {
            return Err(syntax(start, "missing field name"));
        }
        i += 1;
        if i < b.len() && b[i] == b'[' {
            let close = text[i..].find(']').ok_or_else(|| syntax(i, "unclosed `[`"))? + i;
            let inner: Vec<&str> = text[i + 1..close].split_whitespace().collect();
            match inner.as_slice() {
                [lo, "TO", hi] => out.push((
                    start,
                    Tok::Clause { field: word.into(), value: ClauseValue::Range(lo.to_string(), hi.to_string()) },
                )),
                _ => return Err(syntax(i, "expected `[lo TO hi]`")),
            }
            i = close + 1;
        } else {
            let vs = i;
            while i < b.len() && !b[i].is_ascii_whitespace() && b[i] != b'(' && b[i] != b')' {
                i += 1;
            }
            if vs == i {
                return Err(syntax(vs, "missing value"));
            }
            out.push((start, Tok::Clause { field: word.into(), value: ClauseValue::Term(text[vs..i].into()) }));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(usize, Tok)>,
    at: usize,
    len: usize,
    schema: &'a IndexSchema,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.len, |(p, _)| *p)
    }

    fn or(&mut self) -> Result<Query, QueryError> {
        let mut parts = vec![self.and()?];
        while self.peek() == Some(&Tok::Or) {
            self.at += 1;
            parts.push(self.and()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Query::Or(parts) })
    }

    fn and(&mut self) -> Result<Query, QueryError> {
        let mut parts = vec![self.atom()?];
        while self.peek() == Some(&Tok::And) {
            self.at += 1;
            parts.push(self.atom()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Query::And(parts) })
    }

    fn atom(&mut self) -> Result<Query, QueryError> {
        let pos = self.pos();
        match self.toks.get(self.at).cloned() {
            Some((_, Tok::LParen)) => {
                self.at += 1;
                let q = self.or()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(syntax(self.pos(), "expected `)`"));
                }
                self.at += 1;
                Ok(q)
            }
            Some((_, Tok::Clause { field, value })) => {
                self.at += 1;
                self.clause(pos, &field, value)
            }
            Some((_, t)) => Err(syntax(pos, format!("unexpected {t:?}"))),
            None => Err(syntax(pos, "unexpected end of query")),
        }
    }

    fn clause(&self, pos: usize, field: &str, value: ClauseValue) -> Result<Query, QueryError> {
        let spec = self.schema.field(field)?;
        let fid = self.schema.field_id(field).expect("field exists");
        let misuse = |reason: &str| QueryError::FieldMisuse { field: field.into(), reason: reason.into() };
        match value {
            ClauseValue::Range(lo, hi) => {
                if spec.path != UpdatePath::InPlace {
                    return Err(misuse("range filters need an in-place field"));
                }
                Ok(Query::Range {
                    field: field.into(),
                    lo: bound(pos, spec.kind, &lo)?,
                    hi: bound(pos, spec.kind, &hi)?,
                })
            }
            ClauseValue::Term(t) if self.schema.is_indexed(fid) => {
                if spec.kind == FieldKind::Keyword {
                    return Ok(Query::Term { field: fid, term: t });
                }
                let mut toks: Vec<Query> =
                    tokenize(&t).into_iter().map(|term| Query::Term { field: fid, term }).collect();
                match toks.len() {
                    0 => Err(syntax(pos, format!("`{t}` has no searchable tokens"))),
                    1 => Ok(toks.pop().unwrap()),
                    _ => Ok(Query::And(toks)),
                }
            }
            ClauseValue::Term(t) if spec.path == UpdatePath::InPlace => {
                let b = bound(pos, spec.kind, &t)?;
                if b == RangeBound::Unbounded {
                    return Err(syntax(pos, "`*` is only valid inside a range"));
                }
                Ok(Query::Range { field: field.into(), lo: b.clone(), hi: b })
            }
            ClauseValue::Term(_) => Err(misuse("field is not searchable")),
        }
    }
}

fn bound(pos: usize, kind: FieldKind, s: &str) -> Result<RangeBound, QueryError> {
    if s == "*" {
        return Ok(RangeBound::Unbounded);
    }
    let v = match kind {
        FieldKind::Keyword => Value::Str(s.into()),
        _ => match s.parse::<i64>() {
            Ok(i) => Value::Int(i),
            Err(_) => match s.parse::<f64>() {
                Ok(f) if f.is_finite() => Value::Float(f),
                _ => return Err(syntax(pos, format!("`{s}` is not a number"))),
            },
        },
    };
    Ok(RangeBound::Included(v))
}

/// Parses a query and checks field usage against the schema.
pub fn parse_query(text: &str, schema: &IndexSchema) -> Result<Query, QueryError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, at: 0, len: text.len(), schema };
    let q = p.or()?;
    if p.at != p.toks.len() {
        return Err(syntax(p.pos(), "unexpected trailing input"));
    }
    Ok(q)
}

fn candidates(snap: &ReadSnapshot, q: &Query) -> DocIdSet {
    match q {
        Query::Term { field, term } => snap.postings_by_id(*field, term),
        Query::Range { field, lo, hi } => snap
            .forward()
            .range_filter(snap.schema(), field, lo, hi)
            .map(|s| s.intersect(snap.live()))
            .unwrap_or_default(),
        Query::And(parts) => {
            let mut it = parts.iter();
            let mut acc = it.next().map(|p| candidates(snap, p)).unwrap_or_default();
            for p in it {
                if acc.is_empty() {
                    break;
                }
                acc = acc.intersect(&candidates(snap, p));
            }
            acc
        }
        Query::Or(parts) => parts.iter().fold(DocIdSet::new(), |acc, p| acc.union(&candidates(snap, p))),
    }
}

fn terms_of<'q>(q: &'q Query, out: &mut BTreeSet<(FieldId, &'q str)>) {
    match q {
        Query::Term { field, term } => {
            out.insert((*field, term));
        }
        Query::And(p) | Query::Or(p) => p.iter().for_each(|c| terms_of(c, out)),
        Query::Range { .. } => {}
    }
}

/// Unordered set of live ordinals matching `q`.
pub fn matching(snap: &ReadSnapshot, q: &Query) -> DocIdSet {
    candidates(snap, q)
}

/// Runs `q` and returns the top `k` hits ordered by score, then key.
pub fn execute(snap: &ReadSnapshot, q: &Query, k: usize) -> Vec<Hit> {
    crate::metrics::record(|c| &c.query_executions);
    let cand = candidates(snap, q);
    if cand.is_empty() || k == 0 {
        return Vec::new();
    }
    let ords: Vec<u32> = cand.iter().collect();
    let mut scores = vec![0.0f64; ords.len()];
    let mut terms = BTreeSet::new();
    terms_of(q, &mut terms);
    let n = snap.live_count();
    for (field, term) in terms {
        let tfs = snap.term_frequencies(field, term);
        let df = tfs.len() as u64;
        if df == 0 {
            continue;
        }
        let avg = snap.avg_len(field);
        let mut j = 0;
        for (d, tf) in tfs {
            while j < ords.len() && ords[j] < d {
                j += 1;
            }
            if j < ords.len() && ords[j] == d {
                let len = snap.field_len(field, d) as f64;
                scores[j] += bm25_score(tf, df, n, len, avg).expect("postings satisfy the bm25 domain");
            }
        }
    }
    let mut hits: Vec<Hit> = ords
        .into_iter()
        .zip(scores)
        .map(|(ordinal, score)| Hit { key: snap.key_of(ordinal).unwrap_or_default().to_string(), ordinal, score })
        .collect();
    let order = |a: &Hit, b: &Hit| b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key));
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, order);
        hits.truncate(k);
    }
    hits.sort_by(order);
    hits
}

/// Merges per-shard hit lists into one top-`k` list.
pub fn merge_hits(lists: impl IntoIterator<Item = Vec<Hit>>, k: usize) -> Vec<Hit> {
    let mut all: Vec<Hit> = lists.into_iter().flatten().collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.key.cmp(&b.key)));
    all.truncate(k);
    all
}
