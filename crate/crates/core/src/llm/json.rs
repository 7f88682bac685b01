use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{QkgError, Result};

/// Byte range of the balanced `{...}` starting at `start`, honouring JSON strings.
fn balanced_object_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// First parseable JSON object embedded in `text`, ignoring surrounding
/// prose and markdown code fences.
pub fn extract_first_json_object(text: &str) -> Result<Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut from = 0;
    while let Some(offset) = text[from..].find('{') {
        let start = from + offset;
        if let Some(end) = balanced_object_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..end]) {
                return Ok(map);
            }
        }
        from = start + 1;
    }
    Err(QkgError::NoJsonObject)
}

/// Extracts the first JSON object and deserializes it into `T`.
pub fn parse_json_response<T: DeserializeOwned>(text: &str) -> Result<T> {
    let map = extract_first_json_object(text)?;
    serde_json::from_value(Value::Object(map)).map_err(|e| QkgError::InvalidJson(e.to_string()))
}
