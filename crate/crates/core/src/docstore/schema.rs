//! Per-collection shape checks applied on every write.

use super::{Collection, Document};
use chrono::DateTime;
use serde_json::Value;

pub fn valid_person_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn string<'a>(doc: &'a Document, field: &str) -> Result<&'a str, String> {
    match doc.body.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(format!("{field} must be a string")),
        None => Err(format!("missing {field}")),
    }
}

fn nonempty(doc: &Document, field: &str) -> Result<(), String> {
    if string(doc, field)?.is_empty() {
        return Err(format!("{field} must not be empty"));
    }
    Ok(())
}

fn count(doc: &Document, field: &str) -> Result<u64, String> {
    match doc.body.get(field) {
        Some(v) => v.as_u64().ok_or_else(|| format!("{field} must be a nonnegative integer")),
        None => Err(format!("missing {field}")),
    }
}

fn one_of(doc: &Document, field: &str, allowed: &[&str]) -> Result<(), String> {
    let v = string(doc, field)?;
    if !allowed.contains(&v) {
        return Err(format!("{field} must be one of {allowed:?}, got {v:?}"));
    }
    Ok(())
}

fn timestamp(doc: &Document, field: &str, nullable: bool) -> Result<(), String> {
    match doc.body.get(field) {
        Some(Value::Null) | None if nullable => Ok(()),
        Some(Value::String(s)) => {
            DateTime::parse_from_rfc3339(s).map_err(|e| format!("{field}: {e}"))?;
            Ok(())
        }
        _ => Err(format!("{field} must be an RFC 3339 timestamp")),
    }
}

pub(crate) fn validate(coll: Collection, doc: &Document) -> Result<(), String> {
    if doc.id.is_empty() {
        return Err("empty id".into());
    }
    match coll {
        Collection::Persons => {
            if !valid_person_id(&doc.id) {
                return Err(format!("invalid person id {:?}", doc.id));
            }
            nonempty(doc, "name")?;
            count(doc, "sample_count")?;
            one_of(doc, "status", &["enrolling", "ready"])
        }
        Collection::Sessions => {
            string(doc, "name")?;
            one_of(doc, "state", &["idle", "running", "ended"])?;
            count(doc, "debounce_s")?;
            count(doc, "event_count")?;
            timestamp(doc, "started_at", true)?;
            timestamp(doc, "ended_at", true)
        }
        Collection::Attendance => {
            nonempty(doc, "session_id")?;
            nonempty(doc, "person_id")?;
            string(doc, "name")?;
            count(doc, "count")?;
            timestamp(doc, "first_seen", false)?;
            timestamp(doc, "last_seen", false)
        }
        Collection::Models => nonempty(doc, "kind"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn doc(id: &str, v: Value) -> Document {
        Document::new(id, v.as_object().unwrap().clone())
    }

    #[test]
    fn person_ids() {
        assert!(valid_person_id("s001"));
        assert!(valid_person_id("A_b-9"));
        assert!(!valid_person_id("a b"));
        assert!(!valid_person_id(""));
        assert!(!valid_person_id(&"x".repeat(65)));
    }

    #[test]
    fn attendance_requires_person() {
        let ok = json!({"session_id": "s", "person_id": "p", "name": "P", "count": 1,
                        "first_seen": "2024-01-01T00:00:00Z", "last_seen": "2024-01-01T00:00:05Z"});
        assert!(validate(Collection::Attendance, &doc("s:p", ok.clone())).is_ok());
        let mut missing = ok.clone();
        missing.as_object_mut().unwrap().remove("person_id");
        assert!(validate(Collection::Attendance, &doc("s:p", missing)).is_err());
        let mut bad_time = ok;
        bad_time["last_seen"] = json!("yesterday");
        assert!(validate(Collection::Attendance, &doc("s:p", bad_time)).is_err());
    }

    #[test]
    fn person_status_enumerated() {
        let v = json!({"name": "Ada", "sample_count": 0, "status": "enrolling"});
        assert!(validate(Collection::Persons, &doc("s001", v.clone())).is_ok());
        let mut bad = v;
        bad["status"] = json!("done");
        assert!(validate(Collection::Persons, &doc("s001", bad)).is_err());
    }
}
