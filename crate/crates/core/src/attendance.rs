//! Sessions, per-frame recognition, debounced attendance counting, and CSV
//! export.
//!
//! Frame timestamps come from the caller. A session's clock is whatever its
//! frames say, which makes a recorded sequence replayable bit for bit.

use crate::docstore::{Collection, Document, DocumentStore, StoreError};
use crate::enrollment::get_person;
use crate::error::PipelineError;
use crate::haar::{detect_faces, DetectParams, HaarCascade};
use crate::image::{Image, Rect};
use crate::models::{ModelBundle, Recognition};
use crate::siamese::preprocess;
use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CSV_HEADER: &str = "person_id,name,count,first_seen_utc,last_seen_utc";
/// A debounce that never re-counts a person within one session.
pub const DEBOUNCE_FOREVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    Running,
    Ended,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub name: String,
    pub state: SessionState,
    pub started_at: Option<DateTime<Utc>>,
    pub ended_at: Option<DateTime<Utc>>,
    pub debounce_s: u64,
    pub event_count: u64,
    pub last_frame_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceRecord {
    pub session_id: String,
    pub person_id: String,
    pub name: String,
    pub count: u64,
    pub first_seen: DateTime<Utc>,
    pub last_seen: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionEvent {
    pub session_id: String,
    /// Position of this event within its session, from 0.
    pub seq: u64,
    #[serde(rename = "box")]
    pub face_box: Rect,
    /// `None` for a face that was not recognized.
    pub person_id: Option<String>,
    pub name: Option<String>,
    pub top_prob: f64,
    pub timestamp: DateTime<Utc>,
    pub marked: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub persons_marked: u64,
    pub total_events: u64,
}

/// Everything needed to turn a frame into named boxes.
#[derive(Debug, Clone, Copy)]
pub struct Recognizer<'a> {
    pub cascade: &'a HaarCascade,
    pub models: &'a ModelBundle,
    pub detect: &'a DetectParams,
    pub nms_iou: f64,
}

impl Recognizer<'_> {
    /// Detected boxes in suppression order, each with its recognition.
    pub fn recognize_frame(&self, frame: &Image) -> Result<Vec<(Rect, Recognition)>, PipelineError> {
        let side = self.models.chip_side();
        detect_faces(&frame.to_gray(), self.cascade, self.detect, self.nms_iou)?
            .into_iter()
            .map(|d| Ok((d.rect, self.models.recognize(&preprocess(frame, d.rect, side)?)?)))
            .collect()
    }
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, PipelineError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| PipelineError::InvalidInput(format!("timestamp {s:?}: {e}")))
}

fn ts_value(t: Option<&DateTime<Utc>>) -> Value {
    t.map_or(Value::Null, |t| Value::String(format_timestamp(t)))
}

fn object(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => unreachable!("json! object literal"),
    }
}

#[derive(Deserialize)]
struct SessionBody {
    name: String,
    state: SessionState,
    started_at: Option<DateTime<Utc>>,
    ended_at: Option<DateTime<Utc>>,
    debounce_s: u64,
    event_count: u64,
    #[serde(default)]
    last_frame_at: Option<DateTime<Utc>>,
}

impl Session {
    fn from_doc(doc: &Document) -> Result<Self, PipelineError> {
        let b: SessionBody = doc.parse()?;
        Ok(Session {
            session_id: doc.id.clone(),
            name: b.name,
            state: b.state,
            started_at: b.started_at,
            ended_at: b.ended_at,
            debounce_s: b.debounce_s,
            event_count: b.event_count,
            last_frame_at: b.last_frame_at,
        })
    }

    fn body(&self) -> Map<String, Value> {
        object(json!({
            "name": self.name,
            "state": self.state,
            "started_at": ts_value(self.started_at.as_ref()),
            "ended_at": ts_value(self.ended_at.as_ref()),
            "debounce_s": self.debounce_s,
            "event_count": self.event_count,
            "last_frame_at": ts_value(self.last_frame_at.as_ref()),
        }))
    }
}

#[derive(Deserialize)]
struct RecordBody {
    session_id: String,
    person_id: String,
    name: String,
    count: u64,
    first_seen: DateTime<Utc>,
    last_seen: DateTime<Utc>,
}

impl AttendanceRecord {
    fn from_doc(doc: &Document) -> Result<Self, PipelineError> {
        let b: RecordBody = doc.parse()?;
        Ok(AttendanceRecord {
            session_id: b.session_id,
            person_id: b.person_id,
            name: b.name,
            count: b.count,
            first_seen: b.first_seen,
            last_seen: b.last_seen,
        })
    }

    fn to_doc(&self) -> Document {
        Document::new(
            record_id(&self.session_id, &self.person_id),
            object(json!({
                "session_id": self.session_id,
                "person_id": self.person_id,
                "name": self.name,
                "count": self.count,
                "first_seen": format_timestamp(&self.first_seen),
                "last_seen": format_timestamp(&self.last_seen),
            })),
        )
    }
}

pub fn record_id(session_id: &str, person_id: &str) -> String {
    format!("{session_id}:{person_id}")
}

pub fn export_path(exports_dir: &Path, session_id: &str) -> PathBuf {
    exports_dir.join(format!("{session_id}.csv"))
}

pub fn get_session(store: &dyn DocumentStore, session_id: &str) -> Result<Session, PipelineError> {
    match store.get(Collection::Sessions, session_id)? {
        Some(doc) => Session::from_doc(&doc),
        None => Err(PipelineError::SessionNotFound(session_id.to_string())),
    }
}

pub fn list_sessions(store: &dyn DocumentStore) -> Result<Vec<Session>, PipelineError> {
    store.query(Collection::Sessions, &[])?.iter().map(Session::from_doc).collect()
}

/// Records of one session, ordered by person id.
pub fn session_records(store: &dyn DocumentStore, session_id: &str) -> Result<Vec<AttendanceRecord>, PipelineError> {
    let docs = store.query(Collection::Attendance, &[("session_id", Value::String(session_id.to_string()))])?;
    let mut out = docs.iter().map(AttendanceRecord::from_doc).collect::<Result<Vec<_>, _>>()?;
    out.sort_by(|a, b| a.person_id.cmp(&b.person_id));
    Ok(out)
}

/// Opens a running session under the next free `session-NNNNNN` id. The
/// recognizer argument stands for the models a session needs.
pub fn start_session(
    store: &dyn DocumentStore,
    _ready: &Recognizer<'_>,
    name: &str,
    debounce_s: u64,
    started_at: Option<DateTime<Utc>>,
) -> Result<Session, PipelineError> {
    let mut next = store
        .query(Collection::Sessions, &[])?
        .iter()
        .filter_map(|d| d.id.strip_prefix("session-")?.parse::<u64>().ok())
        .max()
        .map_or(1, |n| n + 1);
    loop {
        let session = Session {
            session_id: format!("session-{next:06}"),
            name: name.to_string(),
            state: SessionState::Running,
            started_at,
            ended_at: None,
            debounce_s,
            event_count: 0,
            last_frame_at: None,
        };
        match store.insert(Collection::Sessions, Document::new(session.session_id.clone(), session.body())) {
            Ok(_) => return Ok(session),
            Err(StoreError::DuplicateId { .. }) => next += 1,
            Err(e) => return Err(e.into()),
        }
    }
}

fn due(last_seen: &DateTime<Utc>, now: &DateTime<Utc>, debounce_s: u64) -> bool {
    if debounce_s == DEBOUNCE_FOREVER {
        return false;
    }
    let elapsed_ms = (*now - *last_seen).num_milliseconds();
    elapsed_ms >= 0 && elapsed_ms as u128 >= debounce_s as u128 * 1000
}

/// Recognizes every face in `frame` and updates the session's attendance.
/// Callers feed one session's frames strictly in sequence.
pub fn process_frame(
    store: &dyn DocumentStore,
    recognizer: &Recognizer<'_>,
    session_id: &str,
    frame: &Image,
    timestamp: DateTime<Utc>,
) -> Result<Vec<RecognitionEvent>, PipelineError> {
    let mut session = get_session(store, session_id)?;
    if session.state != SessionState::Running {
        return Err(PipelineError::SessionNotRunning(session_id.to_string()));
    }
    if let Some(last) = session.last_frame_at.filter(|last| *last > timestamp) {
        return Err(PipelineError::NonMonotoneTimestamp {
            got: format_timestamp(&timestamp),
            last: format_timestamp(&last),
        });
    }
    let faces = recognizer.recognize_frame(frame)?;
    if faces.is_empty() {
        return Ok(Vec::new());
    }
    let mut events = Vec::with_capacity(faces.len());
    for (face_box, rec) in faces {
        let seq = session.event_count + events.len() as u64;
        let mut event = RecognitionEvent {
            session_id: session_id.to_string(),
            seq,
            face_box,
            person_id: rec.prediction.top_id.clone(),
            name: None,
            top_prob: rec.prediction.top_prob,
            timestamp,
            marked: false,
        };
        if let Some(pid) = &rec.prediction.top_id {
            let rid = record_id(session_id, pid);
            match store.get(Collection::Attendance, &rid)? {
                None => {
                    let name = get_person(store, pid)?.name;
                    let record = AttendanceRecord {
                        session_id: session_id.to_string(),
                        person_id: pid.clone(),
                        name: name.clone(),
                        count: 1,
                        first_seen: timestamp,
                        last_seen: timestamp,
                    };
                    store.insert(Collection::Attendance, record.to_doc())?;
                    event.name = Some(name);
                    event.marked = true;
                }
                Some(doc) => {
                    let record = AttendanceRecord::from_doc(&doc)?;
                    let marked = due(&record.last_seen, &timestamp, session.debounce_s);
                    let mut fields = object(json!({"last_seen": format_timestamp(&timestamp)}));
                    if marked {
                        fields.insert("count".into(), json!(record.count + 1));
                    }
                    store.patch(Collection::Attendance, &rid, fields)?;
                    event.name = Some(record.name);
                    event.marked = marked;
                }
            }
        }
        events.push(event);
    }
    session.event_count += events.len() as u64;
    session.last_frame_at = Some(timestamp);
    session.started_at.get_or_insert(timestamp);
    store.patch(
        Collection::Sessions,
        session_id,
        object(json!({
            "event_count": session.event_count,
            "last_frame_at": ts_value(session.last_frame_at.as_ref()),
            "started_at": ts_value(session.started_at.as_ref()),
        })),
    )?;
    Ok(events)
}

/// CSV rendering of a session's attendance records.
pub fn export_csv(store: &dyn DocumentStore, session_id: &str) -> Result<Vec<u8>, PipelineError> {
    get_session(store, session_id)?;
    render_csv(&session_records(store, session_id)?)
}

pub fn render_csv(records: &[AttendanceRecord]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(Vec::new());
    let csv_err = |e: csv::Error| PipelineError::InvalidInput(format!("csv: {e}"));
    w.write_record(CSV_HEADER.split(',')).map_err(csv_err)?;
    let fmt = |t: &DateTime<Utc>| t.format("%Y-%m-%dT%H:%M:%SZ").to_string();
    for r in records {
        w.write_record([r.person_id.clone(), r.name.clone(), r.count.to_string(), fmt(&r.first_seen), fmt(&r.last_seen)])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| PipelineError::Io(e.into_error()))
}

/// Ends a running session and writes its CSV to `<exports_dir>/<id>.csv`.
/// `ended_at` defaults to the last frame time, then to the start time.
pub fn end_session(
    store: &dyn DocumentStore,
    exports_dir: &Path,
    session_id: &str,
    ended_at: Option<DateTime<Utc>>,
) -> Result<SessionSummary, PipelineError> {
    let session = get_session(store, session_id)?;
    if session.state != SessionState::Running {
        return Err(PipelineError::SessionNotRunning(session_id.to_string()));
    }
    let ended_at = ended_at.or(session.last_frame_at).or(session.started_at);
    if let (Some(end), Some(start)) = (ended_at, session.started_at.or(session.last_frame_at)) {
        if end < start {
            return Err(PipelineError::InvalidInput(format!(
                "ended_at {} precedes {}",
                format_timestamp(&end),
                format_timestamp(&start)
            )));
        }
    }
    let records = session_records(store, session_id)?;
    let bytes = render_csv(&records)?;
    fs::create_dir_all(exports_dir)?;
    let path = export_path(exports_dir, session_id);
    let tmp = path.with_extension("csv.tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &path)?;
    store.patch(
        Collection::Sessions,
        session_id,
        object(json!({"state": SessionState::Ended, "ended_at": ts_value(ended_at.as_ref())})),
    )?;
    Ok(SessionSummary {
        persons_marked: records.iter().filter(|r| r.count >= 1).count() as u64,
        total_events: session.event_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t(s: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + s, 0).unwrap()
    }

    fn rec(pid: &str, name: &str, count: u64) -> AttendanceRecord {
        AttendanceRecord {
            session_id: "session-000001".into(),
            person_id: pid.into(),
            name: name.into(),
            count,
            first_seen: t(0),
            last_seen: t(65),
        }
    }

    #[test]
    fn csv_header_only_when_empty() {
        assert_eq!(render_csv(&[]).unwrap(), format!("{CSV_HEADER}\n").into_bytes());
    }

    #[test]
    fn csv_one_row_exact_bytes() {
        let out = String::from_utf8(render_csv(&[rec("s001", "Ada", 3)]).unwrap()).unwrap();
        assert_eq!(out, format!("{CSV_HEADER}\ns001,Ada,3,2023-11-14T22:13:20Z,2023-11-14T22:14:25Z\n"));
    }

    #[test]
    fn csv_quotes_where_needed() {
        let out = String::from_utf8(render_csv(&[rec("s002", "Doe, Jane", 1), rec("s003", "Al \"Q\"", 2)]).unwrap())
            .unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert!(lines[1].starts_with("s002,\"Doe, Jane\",1,"));
        assert!(lines[2].starts_with("s003,\"Al \"\"Q\"\"\",2,"));
    }

    #[test]
    fn debounce_boundaries() {
        assert!(due(&t(0), &t(30), 30));
        assert!(!due(&t(0), &t(29), 30));
        assert!(due(&t(0), &t(0), 0));
        assert!(!due(&t(0), &t(1_000_000), DEBOUNCE_FOREVER));
    }

    #[test]
    fn timestamps_round_trip() {
        let ts = parse_timestamp("2024-03-01T08:00:00.250Z").unwrap();
        assert_eq!(format_timestamp(&ts), "2024-03-01T08:00:00.250Z");
        assert_eq!(format_timestamp(&t(0)), "2023-11-14T22:13:20Z");
        assert!(parse_timestamp("yesterday").is_err());
    }
}
