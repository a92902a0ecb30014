//! File-backed store: one append-only log plus one snapshot per collection.
//!
//! Every write appends a full copy of the affected document, so replay is
//! idempotent and a snapshot followed by any suffix of the log recovers the
//! same state.

use super::record::{self, Scan};
use super::{matches, schema, Collection, Document, DocumentStore, Predicate, StoreError};
use serde_json::{Map, Value};
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

type Table = BTreeMap<String, Map<String, Value>>;

const DEFAULT_COMPACT_EVERY: usize = 4096;

struct Log {
    file: File,
    len: u64,
    records: usize,
}

pub struct FileStore {
    dir: PathBuf,
    state: RwLock<HashMap<Collection, Table>>,
    // Single writer: every mutation holds this for its read-modify-append.
    logs: Mutex<HashMap<Collection, Log>>,
    compact_every: usize,
}

fn log_path(dir: &Path, c: Collection) -> PathBuf {
    dir.join(format!("{}.log", c.name()))
}

fn snapshot_path(dir: &Path, c: Collection) -> PathBuf {
    dir.join(format!("{}.snapshot", c.name()))
}

fn sync_dir(dir: &Path) -> std::io::Result<()> {
    File::open(dir)?.sync_all()
}

fn encode(doc: &Document) -> Vec<u8> {
    record::frame(&serde_json::to_vec(doc).expect("documents always serialize"))
}

fn decode(payload: &[u8], source: &Path) -> Result<Document, StoreError> {
    serde_json::from_slice(payload).map_err(|e| StoreError::BadRecord(source.display().to_string(), e.to_string()))
}

/// Applies every record in `bytes`. Returns the offset where valid data
/// ends; a torn final record is excluded.
fn replay(bytes: &[u8], source: &Path, table: &mut Table, tolerate_tail: bool) -> Result<usize, StoreError> {
    let mut at = 0;
    loop {
        match record::next(bytes, at) {
            Scan::Record(payload, next) => {
                let doc = decode(payload, source)?;
                table.insert(doc.id, doc.body);
                at = next;
            }
            Scan::End => return Ok(at),
            Scan::TornTail if tolerate_tail => return Ok(at),
            Scan::TornTail | Scan::Corrupt => {
                return Err(StoreError::CorruptInterior(format!("{} at byte {at}", source.display())))
            }
        }
    }
}

fn read_optional(path: &Path) -> Result<Vec<u8>, StoreError> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e.into()),
    }
}

fn write_snapshot(dir: &Path, c: Collection, table: &Table) -> Result<(), StoreError> {
    let mut bytes = Vec::new();
    for (id, body) in table {
        bytes.extend(encode(&Document::new(id.clone(), body.clone())));
    }
    let tmp = dir.join(format!("{}.snapshot.tmp", c.name()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, snapshot_path(dir, c))?;
    sync_dir(dir)?;
    Ok(())
}

impl FileStore {
    /// Opens `dir`, creating it if needed; same as [`FileStore::compact_and_recover`].
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        Self::compact_and_recover(dir)
    }

    /// Loads each collection's snapshot, replays its log (dropping a torn
    /// final record), writes a fresh snapshot, and empties the log.
    pub fn compact_and_recover(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut state = HashMap::new();
        for c in Collection::ALL {
            let mut table = Table::new();
            let snap = snapshot_path(&dir, c);
            replay(&read_optional(&snap)?, &snap, &mut table, false)?;
            let log = log_path(&dir, c);
            replay(&read_optional(&log)?, &log, &mut table, true)?;
            state.insert(c, table);
        }
        let mut logs = HashMap::new();
        for c in Collection::ALL {
            write_snapshot(&dir, c, &state[&c])?;
            let file = OpenOptions::new().create(true).append(true).open(log_path(&dir, c))?;
            file.set_len(0)?;
            file.sync_all()?;
            logs.insert(c, Log { file, len: 0, records: 0 });
        }
        sync_dir(&dir)?;
        Ok(FileStore {
            dir,
            state: RwLock::new(state),
            logs: Mutex::new(logs),
            compact_every: DEFAULT_COMPACT_EVERY,
        })
    }

    /// Compact a collection once its log holds this many records.
    pub fn with_compaction_threshold(mut self, records: usize) -> Self {
        self.compact_every = records.max(1);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Folds every log into its snapshot.
    pub fn compact(&self) -> Result<(), StoreError> {
        let mut logs = self.logs.lock().unwrap();
        for c in Collection::ALL {
            self.compact_locked(c, logs.get_mut(&c).unwrap())?;
        }
        Ok(())
    }

    fn compact_locked(&self, c: Collection, log: &mut Log) -> Result<(), StoreError> {
        let table = self.state.read().unwrap()[&c].clone();
        write_snapshot(&self.dir, c, &table)?;
        log.file.set_len(0)?;
        log.file.sync_all()?;
        log.len = 0;
        log.records = 0;
        Ok(())
    }

    /// Validates, appends durably, then publishes. Called with the log lock held.
    fn commit(&self, logs: &mut HashMap<Collection, Log>, c: Collection, doc: Document) -> Result<(), StoreError> {
        schema::validate(c, &doc).map_err(|message| StoreError::SchemaViolation { collection: c, message })?;
        let bytes = encode(&doc);
        let log = logs.get_mut(&c).unwrap();
        let appended = log.file.write_all(&bytes).and_then(|_| log.file.sync_data());
        if let Err(e) = appended {
            // Cut back a partial append so it cannot become interior damage.
            let _ = log.file.set_len(log.len);
            return Err(e.into());
        }
        log.len += bytes.len() as u64;
        log.records += 1;
        self.state.write().unwrap().get_mut(&c).unwrap().insert(doc.id, doc.body);
        if log.records >= self.compact_every {
            self.compact_locked(c, log)?;
        }
        Ok(())
    }

    fn current(&self, c: Collection, id: &str) -> Result<Map<String, Value>, StoreError> {
        self.state.read().unwrap()[&c]
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound { collection: c, id: id.to_string() })
    }
}

impl DocumentStore for FileStore {
    fn insert(&self, coll: Collection, doc: Document) -> Result<String, StoreError> {
        let mut logs = self.logs.lock().unwrap();
        if self.state.read().unwrap()[&coll].contains_key(&doc.id) {
            return Err(StoreError::DuplicateId { collection: coll, id: doc.id });
        }
        let id = doc.id.clone();
        self.commit(&mut logs, coll, doc)?;
        Ok(id)
    }

    fn get(&self, coll: Collection, id: &str) -> Result<Option<Document>, StoreError> {
        Ok(self.state.read().unwrap()[&coll].get(id).map(|b| Document::new(id, b.clone())))
    }

    fn update(&self, coll: Collection, doc: Document) -> Result<(), StoreError> {
        let mut logs = self.logs.lock().unwrap();
        self.current(coll, &doc.id)?;
        self.commit(&mut logs, coll, doc)
    }

    fn patch(&self, coll: Collection, id: &str, fields: Map<String, Value>) -> Result<Document, StoreError> {
        let mut logs = self.logs.lock().unwrap();
        let mut body = self.current(coll, id)?;
        body.extend(fields);
        let doc = Document::new(id, body);
        self.commit(&mut logs, coll, doc.clone())?;
        Ok(doc)
    }

    fn increment(&self, coll: Collection, id: &str, field_path: &str, delta: i64) -> Result<i64, StoreError> {
        let mut logs = self.logs.lock().unwrap();
        let mut body = self.current(coll, id)?;
        let mismatch = || StoreError::TypeMismatch(field_path.to_string());
        let mut parts: Vec<&str> = field_path.split('.').collect();
        let leaf = parts.pop().filter(|l| !l.is_empty()).ok_or_else(mismatch)?;
        let mut obj = &mut body;
        for p in parts {
            let next = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            obj = next.as_object_mut().ok_or_else(mismatch)?;
        }
        let old = match obj.get(leaf) {
            None => 0,
            Some(v) => v.as_i64().ok_or_else(mismatch)?,
        };
        let new = old.checked_add(delta).ok_or_else(mismatch)?;
        obj.insert(leaf.to_string(), Value::from(new));
        self.commit(&mut logs, coll, Document::new(id, body))?;
        Ok(new)
    }

    fn query(&self, coll: Collection, predicate: Predicate<'_>) -> Result<Vec<Document>, StoreError> {
        Ok(self.state.read().unwrap()[&coll]
            .iter()
            .map(|(id, body)| Document::new(id.clone(), body.clone()))
            .filter(|d| matches(d, predicate))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn obj(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    fn model(id: &str, n: i64) -> Document {
        Document::new(id, obj(json!({"kind": "test", "n": n})))
    }

    #[test]
    fn fresh_directory_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path().join("db")).unwrap();
        for c in Collection::ALL {
            assert!(store.query(c, &[]).unwrap().is_empty());
        }
    }

    #[test]
    fn insert_get_update_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        assert_eq!(store.get(Collection::Models, "a").unwrap(), None);
        store.insert(Collection::Models, model("a", 1)).unwrap();
        assert_eq!(store.get(Collection::Models, "a").unwrap(), Some(model("a", 1)));
        assert!(matches!(store.insert(Collection::Models, model("a", 2)), Err(StoreError::DuplicateId { .. })));
        store.update(Collection::Models, model("a", 5)).unwrap();
        assert_eq!(store.get(Collection::Models, "a").unwrap(), Some(model("a", 5)));
        assert!(matches!(store.update(Collection::Models, model("b", 1)), Err(StoreError::NotFound { .. })));
    }

    #[test]
    fn schema_checked_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        let doc = Document::new("s:p", obj(json!({"session_id": "s", "name": "x", "count": 1,
            "first_seen": "2024-01-01T00:00:00Z", "last_seen": "2024-01-01T00:00:00Z"})));
        assert!(matches!(store.insert(Collection::Attendance, doc), Err(StoreError::SchemaViolation { .. })));
        assert!(store.query(Collection::Attendance, &[]).unwrap().is_empty());
    }

    #[test]
    fn increments() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        store.insert(Collection::Models, model("a", 3)).unwrap();
        assert_eq!(store.increment(Collection::Models, "a", "fresh", 1).unwrap(), 1);
        assert_eq!(store.increment(Collection::Models, "a", "n", 1).unwrap(), 4);
        assert_eq!(store.increment(Collection::Models, "a", "nested.deep", -2).unwrap(), -2);
        assert!(matches!(store.increment(Collection::Models, "a", "kind", 1), Err(StoreError::TypeMismatch(_))));
        assert!(matches!(store.increment(Collection::Models, "zz", "n", 1), Err(StoreError::NotFound { .. })));
        assert_eq!(store.get(Collection::Models, "a").unwrap().unwrap().field("nested.deep"), Some(&json!(-2)));
    }

    #[test]
    fn query_filters_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::open(dir.path()).unwrap();
        for (id, n) in [("c", 1), ("a", 2), ("b", 1)] {
            store.insert(Collection::Models, model(id, n)).unwrap();
        }
        let ids = |docs: Vec<Document>| docs.into_iter().map(|d| d.id).collect::<Vec<_>>();
        assert_eq!(ids(store.query(Collection::Models, &[]).unwrap()), ["a", "b", "c"]);
        assert_eq!(ids(store.query(Collection::Models, &[("n", json!(1))]).unwrap()), ["b", "c"]);
        assert!(store.query(Collection::Models, &[("n", json!(9))]).unwrap().is_empty());
    }

    #[test]
    fn survives_reopen_and_compaction() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FileStore::open(dir.path()).unwrap().with_compaction_threshold(3);
            for i in 0..10 {
                store.insert(Collection::Models, model(&format!("m{i}"), i)).unwrap();
            }
            store.increment(Collection::Models, "m0", "n", 7).unwrap();
        }
        let store = FileStore::open(dir.path()).unwrap();
        assert_eq!(store.query(Collection::Models, &[]).unwrap().len(), 10);
        assert_eq!(store.get(Collection::Models, "m0").unwrap().unwrap().field("n"), Some(&json!(7)));
        assert_eq!(fs::metadata(log_path(dir.path(), Collection::Models)).unwrap().len(), 0);
    }

    #[test]
    fn interior_corruption_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = FileStore::open(dir.path()).unwrap();
            store.insert(Collection::Models, model("a", 1)).unwrap();
            store.insert(Collection::Models, model("b", 2)).unwrap();
        }
        let path = log_path(dir.path(), Collection::Models);
        let mut bytes = fs::read(&path).unwrap();
        bytes[6] ^= 0x40;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(FileStore::open(dir.path()), Err(StoreError::CorruptInterior(_))));
    }
}
