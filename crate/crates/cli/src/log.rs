//! Line-delimited JSON events on stderr. Output never contains terminal
//! escapes, so `NO_COLOR` holds trivially.

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Map, Value};

pub fn event(level: &str, name: &str, fields: Value) {
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64);
    let mut line = Map::new();
    line.insert("ts_ms".into(), json!(ts));
    line.insert("level".into(), json!(level));
    line.insert("event".into(), json!(name));
    if let Value::Object(extra) = fields {
        line.extend(extra);
    }
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{}", Value::Object(line));
}

pub fn info(name: &str, fields: Value) {
    event("info", name, fields);
}

pub fn error(name: &str, fields: Value) {
    event("error", name, fields);
}
