use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::clock::as_micros;

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t_us: f64,
    pub actor: String,
    pub event: String,
    pub fields: Map<String, Value>,
}

#[derive(Debug, Default, Clone)]
pub struct EventLog {
    records: Vec<EventRecord>,
}

impl EventLog {
    pub fn push(&mut self, at: Duration, actor: impl Into<String>, event: &str, fields: Value) {
        let fields = match fields {
            Value::Object(m) => m,
            Value::Null => Map::new(),
            other => Map::from_iter([("value".to_owned(), other)]),
        };
        self.records.push(EventRecord {
            t_us: as_micros(at),
            actor: actor.into(),
            event: event.to_owned(),
            fields,
        });
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn count(&self, event: &str) -> usize {
        self.records.iter().filter(|r| r.event == event).count()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records are serialisable"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<EventRecord>, serde_json::Error> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}
