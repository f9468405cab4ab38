//! Per-field update topics with consumer-group offsets.
//!
//! Every schema field owns one topic named `<index>.<field>`. A topic is a
//! single ordered partition; offsets are dense from zero. Ordering across
//! topics is not defined. Consumers track their own read position and
//! commit explicitly, which gives at-least-once delivery on replay.
//!
//! With a root directory each topic is also appended to
//! `<root>/<topic>/00000.jsonl` and synced before `append` returns.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{Document, FieldId, IndexSchema, SchemaError, UpdatePath, Value};

#[derive(Debug, Error)]
pub enum LogError {
    #[error("unknown topic `{0}`")]
    UnknownTopic(String),
    #[error("consumer group `{group}` is not registered on `{topic}`")]
    UnknownGroup { group: String, topic: String },
    #[error("routing mismatch on `{topic}`: {reason}")]
    RoutingMismatch { topic: String, reason: String },
    #[error("invalid record: {0}")]
    Invalid(#[from] SchemaError),
    #[error("offset {offset} beyond end {next} of `{topic}`")]
    OffsetOutOfRange { topic: String, offset: u64, next: u64 },
    #[error("commit regression on `{topic}` for `{group}`: {offset} < {committed}")]
    Regression { group: String, topic: String, offset: u64, committed: u64 },
    #[error("malformed record in {path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("log i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Scalar update of one field.
    Field { field: String, value: Value },
    /// Full-document create or replace.
    Doc(Document),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct UpdateRecord {
    pub key: String,
    pub payload: Payload,
    /// Producer-side publish time, ms since the epoch.
    pub ts_ms: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    key: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    field: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    value: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    doc: Option<Document>,
    ts_ms: u64,
}

impl TryFrom<RawRecord> for UpdateRecord {
    type Error = String;
    fn try_from(r: RawRecord) -> Result<Self, String> {
        let payload = match (r.field, r.value, r.doc) {
            (Some(field), Some(value), None) => Payload::Field { field, value },
            (None, None, Some(doc)) => Payload::Doc(doc),
            _ => return Err("record needs either field+value or doc".into()),
        };
        Ok(UpdateRecord { key: r.key, payload, ts_ms: r.ts_ms })
    }
}

impl From<UpdateRecord> for RawRecord {
    fn from(r: UpdateRecord) -> RawRecord {
        let (field, value, doc) = match r.payload {
            Payload::Field { field, value } => (Some(field), Some(value), None),
            Payload::Doc(d) => (None, None, Some(d)),
        };
        RawRecord { key: r.key, field, value, doc, ts_ms: r.ts_ms }
    }
}

impl UpdateRecord {
    pub fn field(key: impl Into<String>, field: impl Into<String>, value: Value, ts_ms: u64) -> Self {
        UpdateRecord {
            key: key.into(),
            payload: Payload::Field { field: field.into(), value },
            ts_ms,
        }
    }

    pub fn doc(key: impl Into<String>, doc: Document, ts_ms: u64) -> Self {
        UpdateRecord { key: key.into(), payload: Payload::Doc(doc), ts_ms }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

struct TopicInner {
    records: Vec<Arc<UpdateRecord>>,
    file: Option<File>,
}

struct Topic {
    name: String,
    field: String,
    path: UpdatePath,
    inner: RwLock<TopicInner>,
}

#[derive(Debug, Default)]
struct LogCounters {
    appends: AtomicU64,
    encoded_bytes: AtomicU64,
    file_bytes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LogStats {
    pub appends: u64,
    /// JSON-line bytes of every appended record.
    pub encoded_bytes: u64,
    /// Bytes written to topic files (file-backed mode only).
    pub file_bytes: u64,
}

/// The set of topics for one index.
pub struct UpdateLog {
    schema: Arc<IndexSchema>,
    topics: HashMap<String, Topic>,
    groups: Mutex<HashMap<(String, String), u64>>,
    root: Option<PathBuf>,
    counters: LogCounters,
}

const SEGMENT_FILE: &str = "00000.jsonl";
const GROUPS_FILE: &str = "_groups.json";

impl UpdateLog {
    /// In-memory log.
    pub fn in_memory(schema: Arc<IndexSchema>) -> Self {
        Self::build(schema, None).expect("in-memory log cannot fail")
    }

    /// File-backed log under `root`; existing topic files and committed
    /// offsets are replayed.
    pub fn open(schema: Arc<IndexSchema>, root: impl Into<PathBuf>) -> Result<Self, LogError> {
        Self::build(schema, Some(root.into()))
    }

    fn build(schema: Arc<IndexSchema>, root: Option<PathBuf>) -> Result<Self, LogError> {
        let mut topics = HashMap::new();
        for f in &schema.fields {
            let name = schema.topic_name(&f.name);
            let mut inner = TopicInner { records: Vec::new(), file: None };
            if let Some(root) = &root {
                let dir = root.join(&name);
                fs::create_dir_all(&dir)?;
                let path = dir.join(SEGMENT_FILE);
                if path.exists() {
                    inner.records = read_records(&path)?;
                }
                inner.file = Some(OpenOptions::new().create(true).append(true).open(&path)?);
            }
            topics.insert(
                name.clone(),
                Topic { name, field: f.name.clone(), path: f.path, inner: RwLock::new(inner) },
            );
        }
        let mut groups = HashMap::new();
        if let Some(root) = &root {
            let gpath = root.join(GROUPS_FILE);
            if gpath.exists() {
                let entries: Vec<(String, String, u64)> = serde_json::from_slice(&fs::read(&gpath)?)
                    .map_err(|e| LogError::Malformed {
                        path: gpath.display().to_string(),
                        line: e.line(),
                        message: e.to_string(),
                    })?;
                for (g, t, o) in entries {
                    groups.insert((g, t), o);
                }
            }
        }
        Ok(UpdateLog { schema, topics, groups: Mutex::new(groups), root, counters: LogCounters::default() })
    }

    pub fn schema(&self) -> &Arc<IndexSchema> {
        &self.schema
    }

    fn topic(&self, name: &str) -> Result<&Topic, LogError> {
        self.topics.get(name).ok_or_else(|| LogError::UnknownTopic(name.to_string()))
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.topics.keys().cloned().collect();
        v.sort();
        v
    }

    /// Topics whose field is routed along `path`.
    pub fn topics_on(&self, path: UpdatePath) -> Vec<String> {
        self.schema
            .fields_on(path)
            .map(|(_, f)| self.schema.topic_name(&f.name))
            .collect()
    }

    pub fn topic_field(&self, topic: &str) -> Result<FieldId, LogError> {
        let t = self.topic(topic)?;
        Ok(self.schema.field_id(&t.field).expect("topic field is in schema"))
    }

    fn check_routing(&self, topic: &Topic, record: &UpdateRecord) -> Result<(), LogError> {
        let mismatch = |reason: String| LogError::RoutingMismatch { topic: topic.name.clone(), reason };
        if record.key.is_empty() {
            return Err(mismatch("empty key".into()));
        }
        match &record.payload {
            Payload::Doc(doc) => {
                if topic.path != UpdatePath::Segment {
                    return Err(mismatch("full documents travel on segment-path topics".into()));
                }
                self.schema.validate_document(doc)?;
                let pk = doc.get(&self.schema.primary_key_field).and_then(Value::as_str);
                if pk != Some(record.key.as_str()) {
                    return Err(mismatch("record key differs from the document's primary key".into()));
                }
            }
            Payload::Field { field, value } => {
                if *field != topic.field {
                    return Err(mismatch(format!("field `{field}` does not own this topic")));
                }
                if topic.path != UpdatePath::InPlace {
                    return Err(mismatch(format!(
                        "segment-path field `{field}` can only change through a full document"
                    )));
                }
                self.schema.validate_update(field, value)?;
            }
        }
        Ok(())
    }

    pub fn append(&self, topic: &str, record: UpdateRecord) -> Result<u64, LogError> {
        Ok(self.append_batch(topic, vec![record])?[0])
    }

    /// Appends records in order with a single sync. Either all are
    /// appended or none.
    pub fn append_batch(&self, topic: &str, records: Vec<UpdateRecord>) -> Result<Vec<u64>, LogError> {
        let t = self.topic(topic)?;
        for r in &records {
            self.check_routing(t, r)?;
        }
        let lines: Vec<String> = records.iter().map(UpdateRecord::to_json_line).collect();
        let encoded: usize = lines.iter().map(|l| l.len() + 1).sum();
        let mut inner = t.inner.write().unwrap();
        if let Some(file) = &mut inner.file {
            let mut buf = String::with_capacity(encoded);
            for l in &lines {
                buf.push_str(l);
                buf.push('\n');
            }
            file.write_all(buf.as_bytes())?;
            file.sync_data()?;
            self.counters.file_bytes.fetch_add(encoded as u64, Ordering::Relaxed);
        }
        let first = inner.records.len() as u64;
        inner.records.extend(records.into_iter().map(Arc::new));
        self.counters.appends.fetch_add(lines.len() as u64, Ordering::Relaxed);
        self.counters.encoded_bytes.fetch_add(encoded as u64, Ordering::Relaxed);
        Ok((first..inner.records.len() as u64).collect())
    }

    pub fn next_offset(&self, topic: &str) -> Result<u64, LogError> {
        Ok(self.topic(topic)?.inner.read().unwrap().records.len() as u64)
    }

    /// Up to `max` records starting at `from`.
    pub fn read(&self, topic: &str, from: u64, max: usize) -> Result<Vec<(u64, Arc<UpdateRecord>)>, LogError> {
        let inner = self.topic(topic)?.inner.read().unwrap();
        let next = inner.records.len() as u64;
        if from > next {
            return Err(LogError::OffsetOutOfRange { topic: topic.to_string(), offset: from, next });
        }
        Ok(inner.records[from as usize..]
            .iter()
            .take(max)
            .enumerate()
            .map(|(i, r)| (from + i as u64, r.clone()))
            .collect())
    }

    /// Registers `group` on `topic` at offset 0 unless already registered.
    pub fn register_group(&self, group: &str, topic: &str) -> Result<(), LogError> {
        self.topic(topic)?;
        let mut groups = self.groups.lock().unwrap();
        groups.entry((group.to_string(), topic.to_string())).or_insert(0);
        Ok(())
    }

    pub fn committed(&self, group: &str, topic: &str) -> Result<u64, LogError> {
        self.topic(topic)?;
        self.groups
            .lock()
            .unwrap()
            .get(&(group.to_string(), topic.to_string()))
            .copied()
            .ok_or_else(|| LogError::UnknownGroup { group: group.to_string(), topic: topic.to_string() })
    }

    /// Records from the group's committed offset. Does not commit.
    pub fn poll(&self, topic: &str, group: &str, max: usize) -> Result<Vec<(u64, Arc<UpdateRecord>)>, LogError> {
        let from = self.committed(group, topic)?;
        self.read(topic, from, max)
    }

    pub fn commit(&self, group: &str, topic: &str, offset: u64) -> Result<(), LogError> {
        self.set_offset(group, topic, offset, false)
    }

    /// Moves the group's offset anywhere in `[0, next]`, including backwards.
    /// Used by consumers that rebuild state by replaying from the start.
    pub fn seek(&self, group: &str, topic: &str, offset: u64) -> Result<(), LogError> {
        self.set_offset(group, topic, offset, true)
    }

    fn set_offset(&self, group: &str, topic: &str, offset: u64, allow_backwards: bool) -> Result<(), LogError> {
        let next = self.next_offset(topic)?;
        if offset > next {
            return Err(LogError::OffsetOutOfRange { topic: topic.to_string(), offset, next });
        }
        let mut groups = self.groups.lock().unwrap();
        let entry = groups
            .get_mut(&(group.to_string(), topic.to_string()))
            .ok_or_else(|| LogError::UnknownGroup { group: group.to_string(), topic: topic.to_string() })?;
        if offset < *entry && !allow_backwards {
            return Err(LogError::Regression {
                group: group.to_string(),
                topic: topic.to_string(),
                offset,
                committed: *entry,
            });
        }
        *entry = offset;
        if let Some(root) = &self.root {
            persist_groups(root, &groups)?;
        }
        Ok(())
    }

    pub fn lag(&self, topic: &str, group: &str) -> Result<u64, LogError> {
        let committed = self.committed(group, topic)?;
        Ok(self.next_offset(topic)? - committed)
    }

    /// Every registered (group, topic, committed offset), sorted.
    pub fn groups(&self) -> Vec<(String, String, u64)> {
        let mut v: Vec<_> = self
            .groups
            .lock()
            .unwrap()
            .iter()
            .map(|((g, t), o)| (g.clone(), t.clone(), *o))
            .collect();
        v.sort();
        v
    }

    pub fn stats(&self) -> LogStats {
        LogStats {
            appends: self.counters.appends.load(Ordering::Relaxed),
            encoded_bytes: self.counters.encoded_bytes.load(Ordering::Relaxed),
            file_bytes: self.counters.file_bytes.load(Ordering::Relaxed),
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<Arc<UpdateRecord>>, LogError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UpdateRecord = serde_json::from_str(&line).map_err(|e| LogError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(Arc::new(rec));
    }
    Ok(out)
}

fn persist_groups(root: &Path, groups: &HashMap<(String, String), u64>) -> Result<(), LogError> {
    let mut entries: Vec<(&str, &str, u64)> = groups.iter().map(|((g, t), o)| (g.as_str(), t.as_str(), *o)).collect();
    entries.sort();
    let tmp = root.join(format!("{GROUPS_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec(&entries).expect("offsets serialize"))?;
    fs::rename(tmp, root.join(GROUPS_FILE))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::tests::products;

    fn log() -> UpdateLog {
        UpdateLog::in_memory(Arc::new(products()))
    }

    fn price(key: &str, v: f64, ts: u64) -> UpdateRecord {
        UpdateRecord::field(key, "price", Value::Float(v), ts)
    }

    fn doc(key: &str, title: &str) -> UpdateRecord {
        let mut d = Document::new();
        d.insert("id".into(), Value::Str(key.into()));
        d.insert("title".into(), Value::Str(title.into()));
        UpdateRecord::doc(key, d, 1)
    }

    #[test]
    fn offsets_are_dense() {
        let log = log();
        assert_eq!(log.append("products.price", price("p1", 1.0, 1)).unwrap(), 0);
        assert_eq!(log.append("products.price", price("p1", 2.0, 2)).unwrap(), 1);
        assert_eq!(log.next_offset("products.price").unwrap(), 2);
    }

    #[test]
    fn routing_is_enforced() {
        let log = log();
        assert!(matches!(
            log.append("products.price", doc("p1", "x")),
            Err(LogError::RoutingMismatch { .. })
        ));
        assert!(matches!(
            log.append("products.title", UpdateRecord::field("p1", "title", Value::Str("x".into()), 1)),
            Err(LogError::RoutingMismatch { .. })
        ));
        assert!(matches!(
            log.append("products.price", UpdateRecord::field("p1", "stock_level", Value::Int(1), 1)),
            Err(LogError::RoutingMismatch { .. })
        ));
        assert!(matches!(
            log.append("products.price", UpdateRecord::field("p1", "price", Value::Str("cheap".into()), 1)),
            Err(LogError::Invalid(_))
        ));
        assert!(matches!(log.append("products.nope", price("p1", 1.0, 1)), Err(LogError::UnknownTopic(_))));
        assert_eq!(log.append("products.id", doc("p1", "red shoe")).unwrap(), 0);
        assert_eq!(log.append("products.title", doc("p2", "blue shoe")).unwrap(), 0);
    }

    #[test]
    fn poll_commit_lag() {
        let log = log();
        let t = "products.price";
        log.register_group("g", t).unwrap();
        for i in 0..3 {
            log.append(t, price("p", i as f64, i)).unwrap();
        }
        let recs = log.poll(t, "g", 10).unwrap();
        assert_eq!(recs.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        // no commit: replay yields the same records
        assert_eq!(log.poll(t, "g", 10).unwrap().len(), 3);
        assert_eq!(log.lag(t, "g").unwrap(), 3);
        log.commit("g", t, 3).unwrap();
        assert_eq!(log.lag(t, "g").unwrap(), 0);
        assert!(log.poll(t, "g", 10).unwrap().is_empty());
        assert!(matches!(log.commit("g", t, 2), Err(LogError::Regression { .. })));
        assert!(matches!(log.commit("g", t, 9), Err(LogError::OffsetOutOfRange { .. })));
        assert!(matches!(log.poll(t, "nobody", 1), Err(LogError::UnknownGroup { .. })));
        log.seek("g", t, 0).unwrap();
        assert_eq!(log.lag(t, "g").unwrap(), 3);
    }

    #[test]
    fn lag_is_next_minus_committed() {
        let log = log();
        let t = "products.price";
        log.register_group("g", t).unwrap();
        for i in 0..10 {
            log.append(t, price("p", 0.0, i)).unwrap();
        }
        log.commit("g", t, 4).unwrap();
        assert_eq!(log.lag(t, "g").unwrap(), 6);
    }

    #[test]
    fn json_line_format() {
        let line = price("p1", 9.99, 17).to_json_line();
        assert_eq!(line, r#"{"key":"p1","field":"price","value":9.99,"ts_ms":17}"#);
        let line = doc("p1", "shoe").to_json_line();
        assert_eq!(line, r#"{"key":"p1","doc":{"id":"p1","title":"shoe"},"ts_ms":1}"#);
        let bad: Result<UpdateRecord, _> = serde_json::from_str(r#"{"key":"p","ts_ms":1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn file_backed_replays_records_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let schema = Arc::new(products());
        {
            let log = UpdateLog::open(schema.clone(), dir.path()).unwrap();
            log.register_group("g", "products.price").unwrap();
            log.append_batch("products.price", vec![price("a", 1.0, 1), price("b", 2.0, 2)]).unwrap();
            log.append("products.id", doc("a", "red")).unwrap();
            log.commit("g", "products.price", 1).unwrap();
            assert!(log.stats().file_bytes > 0);
        }
        assert!(dir.path().join("products.price").join("00000.jsonl").exists());
        let log = UpdateLog::open(schema, dir.path()).unwrap();
        assert_eq!(log.next_offset("products.price").unwrap(), 2);
        assert_eq!(log.next_offset("products.id").unwrap(), 1);
        assert_eq!(log.committed("g", "products.price").unwrap(), 1);
        let recs = log.poll("products.price", "g", 10).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(*recs[0].1, price("b", 2.0, 2));
    }
}
