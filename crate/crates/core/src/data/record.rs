use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::eval::normalize_default;

/// Answer-form of a question, derived from its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Open,
    Yesno,
}

impl QuestionType {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Open => "open",
            QuestionType::Yesno => "yesno",
        }
    }
}

/// One image-question-answer sample.
///
/// Before reformulation `gt_answer` holds an option key and `options` maps keys
/// to answer text; afterwards `options` is absent and `gt_answer` is the text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub question_id: String,
    pub image_path: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<IndexMap<String, String>>,
    pub gt_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<String>,
    /// Fields this crate does not interpret, kept so a load/save cycle is lossless.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

pub const UNKNOWN_MODALITY: &str = "unknown";

impl VqaRecord {
    pub fn new(
        question_id: impl Into<String>,
        image_path: impl Into<String>,
        question: impl Into<String>,
        gt_answer: impl Into<String>,
    ) -> Self {
        VqaRecord {
            question_id: question_id.into(),
            image_path: image_path.into(),
            question: question.into(),
            options: None,
            gt_answer: gt_answer.into(),
            modality: None,
            extra: Map::new(),
        }
    }

    pub fn with_modality(mut self, modality: impl Into<String>) -> Self {
        self.modality = Some(modality.into());
        self
    }

    pub fn with_options<K: Into<String>, V: Into<String>>(mut self, options: impl IntoIterator<Item = (K, V)>) -> Self {
        self.options = Some(options.into_iter().map(|(k, v)| (k.into(), v.into())).collect());
        self
    }

    pub fn modality_or_unknown(&self) -> &str {
        self.modality.as_deref().unwrap_or(UNKNOWN_MODALITY)
    }

    /// `Yesno` iff the normalized ground truth is "yes" or "no".
    pub fn question_type(&self) -> QuestionType {
        classify_answer(&self.gt_answer)
    }
}

pub fn classify_answer(answer: &str) -> QuestionType {
    match normalize_default(answer).as_str() {
        "yes" | "no" => QuestionType::Yesno,
        _ => QuestionType::Open,
    }
}

/// Reads a JSON array of records, validating required string fields.
pub fn load_dataset(path: &Path) -> Result<Vec<VqaRecord>> {
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<VqaRecord>> {
    let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    let Value::Array(items) = value else {
        return Err(Error::Parse {
            offset: 0,
            message: "expected a JSON array of records".into(),
        });
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| validate_record(i, item))
        .collect()
}

fn validate_record(index: usize, item: Value) -> Result<VqaRecord> {
    let placeholder = format!("#{index}");
    let Value::Object(obj) = &item else {
        return Err(Error::Schema {
            field: "<record>".into(),
            question_id: placeholder,
        });
    };
    let qid = match obj.get("question_id") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        _ => {
            return Err(Error::Schema {
                field: "question_id".into(),
                question_id: placeholder,
            })
        }
    };
    let schema = |field: &str| Error::Schema {
        field: field.into(),
        question_id: qid.clone(),
    };
    for field in ["image_path", "question", "gt_answer"] {
        match obj.get(field) {
            Some(Value::String(s)) if !s.is_empty() => {}
            _ => return Err(schema(field)),
        }
    }
    match obj.get("modality") {
        None | Some(Value::String(_)) => {}
        _ => return Err(schema("modality")),
    }
    match obj.get("options") {
        None => {}
        Some(Value::Object(opts)) if opts.values().all(Value::is_string) => {}
        _ => return Err(schema("options")),
    }
    serde_json::from_value(item).map_err(|_| schema("<record>"))
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn save_dataset(path: &Path, records: &[VqaRecord]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(records).expect("records serialize");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Replaces a multiple-choice ground-truth key by the text of that option and
/// drops the options. Records without options pass through unchanged.
pub fn reformulate(record: &VqaRecord) -> Result<VqaRecord> {
    let Some(options) = &record.options else {
        return Ok(record.clone());
    };
    let key = record.gt_answer.trim();
    let text = options.get(key).ok_or_else(|| Error::DanglingAnswer {
        question_id: record.question_id.clone(),
        key: record.gt_answer.clone(),
    })?;
    Ok(VqaRecord {
        options: None,
        gt_answer: text.clone(),
        ..record.clone()
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReformulateStats {
    pub converted: usize,
    pub passed_through: usize,
}

pub fn reformulate_all(records: &[VqaRecord]) -> Result<(Vec<VqaRecord>, ReformulateStats)> {
    let mut stats = ReformulateStats::default();
    let out = records
        .iter()
        .map(|r| {
            if r.options.is_some() {
                stats.converted += 1;
            } else {
                stats.passed_through += 1;
            }
            reformulate(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, stats))
}
