//! Helpers for pulling structured output out of free-form model text.

use serde_json::{Map, Value};

/// Returns the last top-level JSON object embedded in `text`, if any.
///
/// Objects nested inside an earlier object are not candidates; scanning
/// resumes after the end of every object it successfully parses.
pub fn last_json_object(text: &str) -> Option<Map<String, Value>> {
    let mut found = None;
    let mut pos = 0;
    while let Some(off) = text[pos..].find('{') {
        let start = pos + off;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                pos = start + stream.byte_offset();
                found = Some(map);
            }
            _ => pos = start + 1,
        }
    }
    found
}

/// Serializes with sorted object keys. `serde_json::Value` maps are already
/// ordered, so this is a plain `to_string` on a normalized value.
pub fn canonical_string<T: serde::Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes");
    serde_json::to_string(&v).expect("value serializes")
}
