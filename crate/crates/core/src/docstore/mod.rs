//! Document storage for persons, sessions, attendance, and model metadata.
//!
//! [`DocumentStore`] is the narrow interface the pipeline talks to;
//! [`FileStore`] is the default append-only-log implementation.

mod file;
mod record;
mod schema;

pub use file::FileStore;
pub use schema::valid_person_id;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{collection}/{id} already exists")]
    DuplicateId { collection: Collection, id: String },
    #[error("{collection}/{id} not found")]
    NotFound { collection: Collection, id: String },
    #[error("schema violation in {collection}: {message}")]
    SchemaViolation { collection: Collection, message: String },
    #[error("field {0} is not an integer")]
    TypeMismatch(String),
    #[error("checksum failure inside {0}")]
    CorruptInterior(String),
    #[error("undecodable record in {0}: {1}")]
    BadRecord(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collection {
    Persons,
    Sessions,
    Attendance,
    Models,
}

impl Collection {
    pub const ALL: [Collection; 4] = [Collection::Persons, Collection::Sessions, Collection::Attendance, Collection::Models];

    pub fn name(self) -> &'static str {
        match self {
            Collection::Persons => "persons",
            Collection::Sessions => "sessions",
            Collection::Attendance => "attendance",
            Collection::Models => "models",
        }
    }
}

impl fmt::Display for Collection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Collection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Collection::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| format!("unknown collection {s:?}"))
    }
}

/// A keyed JSON object. Keys are kept sorted, so serialization is canonical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub body: Map<String, Value>,
}

impl Document {
    pub fn new(id: impl Into<String>, body: Map<String, Value>) -> Self {
        Document { id: id.into(), body }
    }

    /// Builds a document from any serializable struct that renders as an
    /// object.
    pub fn from_serializable<T: Serialize>(id: impl Into<String>, value: &T) -> Result<Self, serde_json::Error> {
        match serde_json::to_value(value)? {
            Value::Object(body) => Ok(Document::new(id, body)),
            other => Err(serde::ser::Error::custom(format!("expected an object, got {other}"))),
        }
    }

    pub fn parse<T: for<'de> Deserialize<'de>>(&self) -> Result<T, serde_json::Error> {
        T::deserialize(Value::Object(self.body.clone()))
    }

    /// Field lookup by dotted path.
    pub fn field(&self, path: &str) -> Option<&Value> {
        let mut parts = path.split('.');
        let mut cur = self.body.get(parts.next()?)?;
        for p in parts {
            cur = cur.as_object()?.get(p)?;
        }
        Some(cur)
    }
}

/// Equality conjunction over dotted field paths.
pub type Predicate<'a> = &'a [(&'a str, Value)];

pub trait DocumentStore: Send + Sync {
    fn insert(&self, coll: Collection, doc: Document) -> Result<String, StoreError>;

    fn get(&self, coll: Collection, id: &str) -> Result<Option<Document>, StoreError>;

    /// Replaces the body of an existing document.
    fn update(&self, coll: Collection, doc: Document) -> Result<(), StoreError>;

    /// Overwrites the given top-level fields of an existing document in one
    /// atomic write.
    fn patch(&self, coll: Collection, id: &str, fields: Map<String, Value>) -> Result<Document, StoreError>;

    /// Adds `delta` to the integer at `field_path` (absent counts as zero)
    /// and returns the new value.
    fn increment(&self, coll: Collection, id: &str, field_path: &str, delta: i64) -> Result<i64, StoreError>;

    /// Matching documents in ascending id order.
    fn query(&self, coll: Collection, predicate: Predicate<'_>) -> Result<Vec<Document>, StoreError>;
}

fn matches(doc: &Document, predicate: Predicate<'_>) -> bool {
    predicate.iter().all(|(path, want)| doc.field(path) == Some(want))
}
