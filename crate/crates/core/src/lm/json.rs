use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("no parseable JSON object in model output")]
pub struct JsonParseError {
    pub raw: String,
}

/// Pulls the first balanced top-level JSON object out of model output.
///
/// Code fences are stripped first. Candidates that balance but fail to parse
/// are skipped and the scan continues from the next `{`.
pub fn extract_json(raw: &str) -> Result<Value, JsonParseError> {
    let text = strip_fences(raw);
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        if let Some(close) = matching_brace(bytes, open) {
            if let Ok(v) = serde_json::from_str::<Value>(&text[open..=close]) {
                if v.is_object() {
                    return Ok(v);
                }
            }
        }
        start = open + 1;
    }
    Err(JsonParseError {
        raw: raw.to_string(),
    })
}

fn strip_fences(raw: &str) -> String {
    raw.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Index of the brace closing the one at `open`, honouring JSON strings.
fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
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
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}
