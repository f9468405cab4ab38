//! Index schema, column families and per-field update routing.
//!
//! Every field is declared once, at index creation, together with the
//! column family it belongs to. The family fixes the update path: fields on
//! the `segment` path are tokenized and shipped through write nodes as
//! immutable segments, fields on the `in-place` path are written straight
//! into forward arrays on the search nodes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("schema syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema constraint violated: {0}")]
    Constraint(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("type mismatch for field `{field}`: expected {expected}, got {got}")]
    TypeMismatch {
        field: String,
        expected: FieldKind,
        got: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Text,
    Keyword,
    Int64,
    Float64,
}

impl FieldKind {
    /// Text and keyword fields on the segment path get inverted postings.
    pub fn is_scalar(self) -> bool {
        !matches!(self, FieldKind::Text)
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FieldKind::Text => "text",
            FieldKind::Keyword => "keyword",
            FieldKind::Int64 => "int64",
            FieldKind::Float64 => "float64",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum UpdatePath {
    #[serde(rename = "segment")]
    Segment,
    #[serde(rename = "in-place")]
    InPlace,
}

impl fmt::Display for UpdatePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdatePath::Segment => "segment",
            UpdatePath::InPlace => "in-place",
        })
    }
}

/// A typed field value as it travels through documents and update records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Numeric view; integers widen to f64.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Float(f) => Some(*f),
            Value::Str(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Float(x) => write!(f, "{x}"),
            Value::Str(s) => f.write_str(s),
        }
    }
}

/// A flat document: field name to value. Nested and multi-valued fields are
/// not supported.
pub type Document = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub path: UpdatePath,
    pub column_family: String,
    pub fast_search: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnFamily {
    pub name: String,
    pub freshness_sla_ms: u64,
    pub path: UpdatePath,
}

/// Field identifier: position of the field in [`IndexSchema::fields`].
pub type FieldId = u16;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexSchema {
    pub index_name: String,
    pub primary_key_field: String,
    pub fields: Vec<FieldSpec>,
    pub families: Vec<ColumnFamily>,
    by_name: HashMap<String, FieldId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    index: String,
    primary_key: String,
    families: Vec<ColumnFamily>,
    fields: Vec<RawField>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    name: String,
    kind: FieldKind,
    family: String,
    #[serde(default)]
    fast_search: bool,
}

#[derive(Serialize)]
struct RawFieldOut<'a> {
    name: &'a str,
    kind: FieldKind,
    family: &'a str,
    fast_search: bool,
}

#[derive(Serialize)]
struct RawSchemaOut<'a> {
    index: &'a str,
    primary_key: &'a str,
    families: &'a [ColumnFamily],
    fields: Vec<RawFieldOut<'a>>,
}

fn constraint(msg: impl Into<String>) -> SchemaError {
    SchemaError::Constraint(msg.into())
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

/// Parses and validates a JSON schema document.
pub fn parse_schema(document: &str) -> Result<IndexSchema, SchemaError> {
    let raw: RawSchema = serde_json::from_str(document).map_err(|e| SchemaError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    build_schema(raw)
}

fn build_schema(raw: RawSchema) -> Result<IndexSchema, SchemaError> {
    if !is_identifier(&raw.index) {
        return Err(constraint(format!("invalid index name `{}`", raw.index)));
    }
    let mut families_by_name = HashMap::new();
    for family in &raw.families {
        if !is_identifier(&family.name) {
            return Err(constraint(format!("invalid family name `{}`", family.name)));
        }
        if family.freshness_sla_ms == 0 {
            return Err(constraint(format!(
                "family `{}` needs a positive freshness_sla_ms",
                family.name
            )));
        }
        if families_by_name.insert(family.name.clone(), family).is_some() {
            return Err(constraint(format!("duplicate family `{}`", family.name)));
        }
    }

    let mut fields = Vec::with_capacity(raw.fields.len());
    let mut seen = HashSet::new();
    for f in raw.fields {
        if !is_identifier(&f.name) {
            return Err(constraint(format!("invalid field name `{}`", f.name)));
        }
        if !seen.insert(f.name.clone()) {
            return Err(constraint(format!("duplicate field `{}`", f.name)));
        }
        let family = families_by_name.get(&f.family).ok_or_else(|| {
            constraint(format!("field `{}` names unknown family `{}`", f.name, f.family))
        })?;
        let path = family.path;
        if f.kind == FieldKind::Text && path == UpdatePath::InPlace {
            return Err(constraint(format!(
                "text field `{}` cannot be routed in-place",
                f.name
            )));
        }
        if f.fast_search && path != UpdatePath::InPlace {
            return Err(constraint(format!(
                "fast_search on `{}` requires the in-place path",
                f.name
            )));
        }
        fields.push(FieldSpec {
            name: f.name,
            kind: f.kind,
            path,
            column_family: f.family,
            fast_search: f.fast_search,
        });
    }
    if fields.len() > FieldId::MAX as usize {
        return Err(constraint("too many fields"));
    }

    let pk = fields
        .iter()
        .find(|f| f.name == raw.primary_key)
        .ok_or_else(|| constraint(format!("primary key `{}` is not a declared field", raw.primary_key)))?;
    if pk.kind != FieldKind::Keyword || pk.path != UpdatePath::Segment {
        return Err(constraint(format!(
            "primary key `{}` must be a keyword field on the segment path",
            pk.name
        )));
    }

    let by_name = fields
        .iter()
        .enumerate()
        .map(|(i, f)| (f.name.clone(), i as FieldId))
        .collect();
    Ok(IndexSchema {
        index_name: raw.index,
        primary_key_field: raw.primary_key,
        fields,
        families: raw.families,
        by_name,
    })
}

impl IndexSchema {
    pub fn field_id(&self, name: &str) -> Option<FieldId> {
        self.by_name.get(name).copied()
    }

    pub fn field(&self, name: &str) -> Result<&FieldSpec, SchemaError> {
        self.field_id(name)
            .map(|id| &self.fields[id as usize])
            .ok_or_else(|| SchemaError::UnknownField(name.to_string()))
    }

    pub fn field_by_id(&self, id: FieldId) -> Option<&FieldSpec> {
        self.fields.get(id as usize)
    }

    pub fn family(&self, name: &str) -> Option<&ColumnFamily> {
        self.families.iter().find(|f| f.name == name)
    }

    pub fn primary_key_id(&self) -> FieldId {
        self.by_name[&self.primary_key_field]
    }

    /// Topic carrying updates for `field`.
    pub fn topic_name(&self, field: &str) -> String {
        format!("{}.{}", self.index_name, field)
    }

    /// Topic that full-document create/replace records are published to.
    pub fn document_topic(&self) -> String {
        self.topic_name(&self.primary_key_field)
    }

    /// The update path of a field and the name of its dedicated topic.
    pub fn route_of(&self, field: &str) -> Result<(UpdatePath, String), SchemaError> {
        let spec = self.field(field)?;
        Ok((spec.path, self.topic_name(field)))
    }

    /// Fields routed along `path`, in declaration order.
    pub fn fields_on(&self, path: UpdatePath) -> impl Iterator<Item = (FieldId, &FieldSpec)> {
        self.fields
            .iter()
            .enumerate()
            .filter(move |(_, f)| f.path == path)
            .map(|(i, f)| (i as FieldId, f))
    }

    /// Fields with inverted postings: text and keyword on the segment path.
    pub fn is_indexed(&self, id: FieldId) -> bool {
        self.field_by_id(id)
            .map(|f| f.path == UpdatePath::Segment && matches!(f.kind, FieldKind::Text | FieldKind::Keyword))
            .unwrap_or(false)
    }

    pub fn validate_update(&self, field: &str, value: &Value) -> Result<(), SchemaError> {
        let spec = self.field(field)?;
        check_kind(spec, value)
    }

    /// Checks a full document: primary key present, every field declared and
    /// well typed.
    pub fn validate_document(&self, doc: &Document) -> Result<(), SchemaError> {
        match doc.get(&self.primary_key_field) {
            Some(Value::Str(k)) if !k.is_empty() => {}
            _ => {
                return Err(constraint(format!(
                    "document lacks primary key `{}`",
                    self.primary_key_field
                )))
            }
        }
        for (name, value) in doc {
            self.validate_update(name, value)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let out = RawSchemaOut {
            index: &self.index_name,
            primary_key: &self.primary_key_field,
            families: &self.families,
            fields: self
                .fields
                .iter()
                .map(|f| RawFieldOut {
                    name: &f.name,
                    kind: f.kind,
                    family: &f.column_family,
                    fast_search: f.fast_search,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&out).expect("schema serializes")
    }
}

fn check_kind(spec: &FieldSpec, value: &Value) -> Result<(), SchemaError> {
    let ok = match spec.kind {
        FieldKind::Text | FieldKind::Keyword => matches!(value, Value::Str(_)),
        FieldKind::Int64 => matches!(value, Value::Int(_)),
        // JSON does not distinguish 9 from 9.0
        FieldKind::Float64 => matches!(value, Value::Float(_) | Value::Int(_)),
    };
    if ok {
        Ok(())
    } else {
        Err(SchemaError::TypeMismatch {
            field: spec.name.clone(),
            expected: spec.kind,
            got: value.type_name(),
        })
    }
}
