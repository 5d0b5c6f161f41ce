//! Pulls the first balanced JSON object or array out of model output that may
//! carry surrounding prose or code fences.

use serde_json::Value;

/// First balanced `{...}` in `text` that parses as a JSON object.
pub fn extract_json_object(text: &str) -> Option<Value> {
    extract(text, b'{', b'}').filter(Value::is_object)
}

/// First balanced `[...]` in `text` that parses as a JSON array.
pub fn extract_json_array(text: &str) -> Option<Value> {
    extract(text, b'[', b']').filter(Value::is_array)
}

fn extract(text: &str, open: u8, close: u8) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(offset) = bytes[start..].iter().position(|&b| b == open) {
        let from = start + offset;
        if let Some(end) = balanced_end(bytes, from, open, close) {
            if let Ok(value) = serde_json::from_str::<Value>(&text[from..=end]) {
                return Some(value);
            }
        }
        start = from + 1;
    }
    None
}

/// Index of the delimiter closing the one at `from`, skipping string bodies.
fn balanced_end(bytes: &[u8], from: usize, open: u8, close: u8) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(from) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        if b == b'"' {
            in_string = true;
        } else if b == open {
            depth += 1;
        } else if b == close {
            depth -= 1;
            if depth == 0 {
                return Some(i);
            }
        }
    }
    None
}
