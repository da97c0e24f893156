//! Lenient extraction of structured output from model responses.
//!
//! Attacker responses must carry a machine-readable JSON block; prose around
//! the block is tolerated. Extraction first looks for a fenced code block,
//! then for the first balanced `{...}` region that parses as a JSON object.

use serde_json::Value;

/// Find a JSON object in free-form model output.
pub fn extract_json_object(text: &str) -> Option<Value> {
    if let Some(block) = fenced_block(text) {
        if let Ok(value) = serde_json::from_str::<Value>(block.trim()) {
            if value.is_object() {
                return Some(value);
            }
        }
    }
    balanced_object(text)
}

fn fenced_block(text: &str) -> Option<&str> {
    let open = text.find("```")?;
    let after = &text[open + 3..];
    // skip an optional language tag on the fence line
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
    let body = &after[body_start..];
    let close = body.find("```")?;
    Some(&body[..close])
}

fn balanced_object(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    let mut start = None;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
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
        match b {
            b'"' => in_string = true,
            b'{' => {
                if start.is_none() {
                    start = Some(i);
                }
                depth += 1;
            }
            b'}' => {
                if depth > 0 {
                    depth -= 1;
                    if depth == 0 {
                        let candidate = &text[start.unwrap()..=i];
                        if let Ok(value) = serde_json::from_str::<Value>(candidate) {
                            if value.is_object() {
                                return Some(value);
                            }
                        }
                        start = None;
                    }
                }
            }
            _ => {}
        }
    }
    None
}

/// Read a required string field.
pub fn string_field(value: &Value, field: &str) -> Option<String> {
    value
        .get(field)
        .and_then(|v| v.as_str())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
}

/// Read a required list-of-strings field.
pub fn string_list_field(value: &Value, field: &str) -> Option<Vec<String>> {
    let list = value.get(field)?.as_array()?;
    let mut out = Vec::with_capacity(list.len());
    for item in list {
        out.push(item.as_str()?.trim().to_string());
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_fenced_block() {
        let text = "Here you go:\n```json\n{\"topic\": \"x\"}\n```\nthanks";
        let v = extract_json_object(text).unwrap();
        assert_eq!(v["topic"], "x");
    }

    #[test]
    fn extracts_bare_object_with_prose() {
        let text = "Sure! The profile is {\"topic\": \"x\", \"n\": 2} as requested.";
        let v = extract_json_object(text).unwrap();
        assert_eq!(v["n"], 2);
    }

    #[test]
    fn skips_invalid_then_finds_valid() {
        let text = "{not json} then {\"ok\": true}";
        let v = extract_json_object(text).unwrap();
        assert_eq!(v["ok"], true);
    }

    #[test]
    fn nested_braces_inside_strings() {
        let text = r#"{"doc": "has { braces } inside"}"#;
        let v = extract_json_object(text).unwrap();
        assert_eq!(v["doc"], "has { braces } inside");
    }

    #[test]
    fn garbage_yields_none() {
        assert!(extract_json_object("no structure here").is_none());
    }
}
