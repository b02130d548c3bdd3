use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Neutral,
    Discriminatory,
}

impl Label {
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "neutral" => Some(Label::Neutral),
            "discriminatory" => Some(Label::Discriminatory),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Neutral => "neutral",
            Label::Discriminatory => "discriminatory",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Regional,
    Ethnic,
    Occupational,
    Distractor,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Regional,
        Category::Ethnic,
        Category::Occupational,
        Category::Distractor,
    ];

    pub fn parse(s: &str) -> Option<Category> {
        match s.trim().to_ascii_lowercase().as_str() {
            "regional" => Some(Category::Regional),
            "ethnic" => Some(Category::Ethnic),
            "occupational" => Some(Category::Occupational),
            "distractor" => Some(Category::Distractor),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Regional => "regional",
            Category::Ethnic => "ethnic",
            Category::Occupational => "occupational",
            Category::Distractor => "distractor",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct DatasetRecord {
    pub prompt: String,
    pub response: Option<String>,
    pub label: Option<Label>,
    pub category: Category,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    prompt: Option<String>,
    #[serde(default)]
    response: Option<String>,
    #[serde(default)]
    label: Option<String>,
    category: Option<String>,
}

fn parse_line(line: &str) -> std::result::Result<DatasetRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| format!("malformed record: {e}"))?;
    let prompt = raw.prompt.ok_or("missing prompt")?;
    if prompt.trim().is_empty() {
        return Err("empty prompt".into());
    }
    let label = match raw.label {
        None => None,
        Some(l) => Some(Label::parse(&l).ok_or_else(|| format!("unknown label {l:?}"))?),
    };
    let category = raw.category.ok_or("missing category")?;
    let category = Category::parse(&category).ok_or_else(|| format!("unknown category {category:?}"))?;
    Ok(DatasetRecord {
        prompt,
        response: raw.response,
        label,
        category,
    })
}

/// Parses newline-delimited JSON records. Blank lines are skipped; the
/// first invalid line aborts with its 1-based line number.
pub fn parse_dataset(text: &str, path: &Path) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_line(line).map_err(|message| Error::Data {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    parse_dataset(&fsutil::read_to_string(path)?, path)
}

pub fn to_ndjson(records: &[DatasetRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    fsutil::write_atomic(path, to_ndjson(records)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<DatasetRecord>> {
        parse_dataset(text, Path::new("mem.jsonl"))
    }

    #[test]
    fn three_lines_three_records() {
        let text = r#"{"prompt":"p1","response":"r1","label":"neutral","category":"regional"}
{"prompt":"p2","response":"r2","label":"discriminatory","category":"ethnic"}
{"prompt":"p3","response":null,"label":null,"category":"distractor"}
"#;
        let recs = parse(text).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].label, Some(Label::Discriminatory));
        assert_eq!(recs[2].response, None);
    }

    #[test]
    fn label_case_is_normalized() {
        let recs = parse(r#"{"prompt":"p","response":"r","label":"Neutral","category":"Occupational"}"#).unwrap();
        assert_eq!(recs[0].label, Some(Label::Neutral));
        assert_eq!(recs[0].category, Category::Occupational);
    }

    #[test]
    fn missing_prompt_names_line() {
        let text = "{\"prompt\":\"p\",\"response\":\"r\",\"label\":\"neutral\",\"category\":\"ethnic\"}\n{\"response\":\"r\",\"label\":\"neutral\",\"category\":\"ethnic\"}\n";
        let err = parse(text).unwrap_err();
        match err {
            Error::Data { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("prompt"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_label_is_rejected() {
        let err = parse(r#"{"prompt":"p","response":"r","label":"rude","category":"ethnic"}"#).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(parse(r#"{"prompt":"p","category":"ethnic","extra":1}"#).is_err());
    }

    #[test]
    fn writes_exactly_the_four_keys() {
        let rec = DatasetRecord {
            prompt: "p".into(),
            response: Some("r".into()),
            label: Some(Label::Neutral),
            category: Category::Regional,
        };
        let line = to_ndjson(std::slice::from_ref(&rec)).unwrap();
        let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys.len(), 4);
        assert_eq!(parse(&line).unwrap(), vec![rec]);
    }
}
