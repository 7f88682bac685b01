use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::json::extract_first_json_object;
use crate::error::{QkgError, Result};

/// Letters allowed for a single-answer multiple-choice item.
pub const ANSWER_LETTERS: [char; 10] = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'J'];

/// Structured answer returned by the reasoner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAResponse {
    pub llm_answer_choice: char,
    pub selected_option_text: String,
    pub reasoning: String,
}

fn string_field(map: &serde_json::Map<String, Value>, field: &str) -> Result<String> {
    match map.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(QkgError::Validation {
            field: field.into(),
            message: "expected a string".into(),
        }),
        None => Err(QkgError::Validation {
            field: field.into(),
            message: "missing".into(),
        }),
    }
}

/// Normalizes an answer letter: trims, uppercases, and checks it is one of A-J.
pub fn normalize_answer_letter(raw: &str) -> Result<char> {
    let trimmed = raw.trim();
    let mut chars = trimmed.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if ANSWER_LETTERS.contains(&c.to_ascii_uppercase()) => Ok(c.to_ascii_uppercase()),
        _ => Err(QkgError::Validation {
            field: "llm_answer_choice".into(),
            message: format!("`{trimmed}` is not a single letter A-J"),
        }),
    }
}

/// Parses a reasoner response into a [`QAResponse`]. Either every field is
/// valid or a typed error is returned.
pub fn parse_qa_response(raw: &str) -> Result<QAResponse> {
    let map = extract_first_json_object(raw)?;
    let letter = string_field(&map, "llm_answer_choice")?;
    let llm_answer_choice = normalize_answer_letter(&letter)?;
    Ok(QAResponse {
        llm_answer_choice,
        selected_option_text: string_field(&map, "selected_option_text")?,
        reasoning: string_field(&map, "reasoning")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CASE_A: &str = r#"{"llm_answer_choice":"D","selected_option_text":"Shingles vaccine","reasoning":"..."}"#;

    #[test]
    fn plain_object() {
        let r = parse_qa_response(CASE_A).unwrap();
        assert_eq!(r.llm_answer_choice, 'D');
        assert_eq!(r.selected_option_text, "Shingles vaccine");
    }

    #[test]
    fn fenced_in_prose() {
        let raw = format!("Here is my answer:\n```json\n{CASE_A}\n```\nThanks.");
        assert_eq!(parse_qa_response(&raw).unwrap(), parse_qa_response(CASE_A).unwrap());
    }

    #[test]
    fn lowercase_letter_normalized() {
        let r = parse_qa_response(r#"{"llm_answer_choice":" b ","selected_option_text":"x","reasoning":"y"}"#).unwrap();
        assert_eq!(r.llm_answer_choice, 'B');
    }

    #[test]
    fn out_of_range_letter() {
        let e = parse_qa_response(r#"{"llm_answer_choice":"Z","selected_option_text":"x","reasoning":"y"}"#);
        assert!(matches!(e, Err(QkgError::Validation { ref field, .. }) if field == "llm_answer_choice"));
    }

    #[test]
    fn missing_field_named() {
        let e = parse_qa_response(r#"{"llm_answer_choice":"A","reasoning":"y"}"#);
        assert!(matches!(e, Err(QkgError::Validation { ref field, .. }) if field == "selected_option_text"));
    }

    #[test]
    fn no_object() {
        assert!(matches!(
            parse_qa_response("The answer is D."),
            Err(QkgError::NoJsonObject)
        ));
    }
}
