//! Exact-match scoring with open/yes-no and per-modality breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{classify_answer, detokenize, tokenize, ImageBank, QuestionType, VqaRecord};
use crate::error::{Error, Result};
use crate::model::{GenerationParams, VlmModel};

/// Which normalization steps apply. Steps always run in the order
/// trim, collapse, lowercase, strip terminal period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationRules {
    pub trim: bool,
    pub collapse_whitespace: bool,
    pub lowercase: bool,
    pub strip_terminal_period: bool,
}

impl Default for NormalizationRules {
    fn default() -> Self {
        NormalizationRules {
            trim: true,
            collapse_whitespace: true,
            lowercase: true,
            strip_terminal_period: true,
        }
    }
}

pub fn normalize(s: &str, rules: &NormalizationRules) -> String {
    let mut out = if rules.trim {
        s.trim().to_string()
    } else {
        s.to_string()
    };
    if rules.collapse_whitespace {
        out = out.split_whitespace().collect::<Vec<_>>().join(" ");
    }
    if rules.lowercase {
        out = out.to_lowercase();
    }
    if rules.strip_terminal_period {
        // Removing a period can expose whitespace or another period; strip the
        // whole run so a second pass has nothing left to do.
        let keep = if rules.trim {
            out.trim_end_matches(|c: char| c == '.' || c.is_whitespace())
        } else {
            out.trim_end_matches('.')
        };
        out.truncate(keep.len());
    }
    out
}

pub fn normalize_default(s: &str) -> String {
    normalize(s, &NormalizationRules::default())
}

pub fn exact_match(prediction: &str, gt: &str, rules: &NormalizationRules) -> bool {
    normalize(prediction, rules) == normalize(gt, rules)
}

pub fn classify_question_type(record: &VqaRecord) -> QuestionType {
    classify_answer(&record.gt_answer)
}

/// `correct / total` as a percentage rounded half away from zero to one decimal.
/// Integer arithmetic, so `.x5` boundaries are exact.
pub fn accuracy_pct(correct: usize, total: usize) -> Option<f64> {
    if total == 0 {
        return None;
    }
    let (c, t) = (correct as u128, total as u128);
    let tenths = (2000 * c + t) / (2 * t);
    Some(tenths as f64 / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub total: usize,
    pub correct: usize,
    pub incorrect: usize,
    /// `None` only for an empty stratum.
    pub accuracy_pct: Option<f64>,
}

impl Tally {
    pub fn new(correct: usize, total: usize) -> Result<Self> {
        if correct > total {
            return Err(Error::Contract(format!("{correct} correct out of {total}")));
        }
        Ok(Tally {
            total,
            correct,
            incorrect: total - correct,
            accuracy_pct: accuracy_pct(correct, total),
        })
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        if correct {
            self.correct += 1;
        } else {
            self.incorrect += 1;
        }
        self.accuracy_pct = accuracy_pct(self.correct, self.total);
    }
}

impl Default for Tally {
    fn default() -> Self {
        Tally::new(0, 0).expect("empty tally")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub question_id: String,
    pub prediction: String,
    pub gt: String,
    pub question_type: QuestionType,
    pub modality: String,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Tally,
    pub by_type: BTreeMap<QuestionType, Tally>,
    pub by_modality: BTreeMap<String, Tally>,
    pub verdicts: Vec<Verdict>,
}

impl EvalReport {
    /// Aggregates verdicts (sorted by `question_id` first).
    pub fn from_verdicts(mut verdicts: Vec<Verdict>) -> Result<Self> {
        if verdicts.is_empty() {
            return Err(Error::Contract("accuracy is undefined for zero records".into()));
        }
        verdicts.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        let mut overall = Tally::default();
        let mut by_type: BTreeMap<QuestionType, Tally> = [
            (QuestionType::Open, Tally::default()),
            (QuestionType::Yesno, Tally::default()),
        ]
        .into();
        let mut by_modality: BTreeMap<String, Tally> = BTreeMap::new();
        for v in &verdicts {
            overall.add(v.correct);
            by_type
                .get_mut(&v.question_type)
                .expect("both types present")
                .add(v.correct);
            by_modality.entry(v.modality.clone()).or_default().add(v.correct);
        }
        Ok(EvalReport {
            overall,
            by_type,
            by_modality,
            verdicts,
        })
    }

    /// Report from pre-aggregated counts. The overall row is the sum of the
    /// per-type rows; the modality table is taken as given.
    pub fn from_counts(counts: &CountsFile) -> Result<Self> {
        let mut by_type = BTreeMap::new();
        let (mut correct, mut total) = (0, 0);
        for qt in [QuestionType::Open, QuestionType::Yesno] {
            let c = counts.by_type.get(&qt).copied().unwrap_or_default();
            let t = Tally::new(c.correct, c.correct + c.incorrect)?;
            correct += t.correct;
            total += t.total;
            by_type.insert(qt, t);
        }
        if total == 0 {
            return Err(Error::Contract("accuracy is undefined for zero records".into()));
        }
        let by_modality = counts
            .by_modality
            .iter()
            .map(|(m, c)| Ok((m.clone(), Tally::new(c.correct, c.total)?)))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            overall: Tally::new(correct, total)?,
            by_type,
            by_modality,
            verdicts: Vec::new(),
        })
    }

    /// Checks the aggregation identity; counts-mode modality tables may
    /// legitimately disagree, so callers decide whether a mismatch is an error.
    pub fn consistency_notes(&self) -> Vec<String> {
        let mut notes = Vec::new();
        let type_sum: usize = self.by_type.values().map(|t| t.correct).sum();
        if type_sum != self.overall.correct {
            notes.push(format!(
                "per-type correct sums to {type_sum}, overall is {}",
                self.overall.correct
            ));
        }
        if !self.by_modality.is_empty() {
            let total: usize = self.by_modality.values().map(|t| t.total).sum();
            let correct: usize = self.by_modality.values().map(|t| t.correct).sum();
            if (total, correct) != (self.overall.total, self.overall.correct) {
                notes.push(format!(
                    "modality rows sum to {correct}/{total}, overall is {}/{}",
                    self.overall.correct, self.overall.total
                ));
            }
        }
        notes
    }

    /// Question-type table followed by a total row.
    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:<14} {:>9} {:>9} {:>9} {:>7}",
            "type", "correct", "incorrect", "total", "acc%"
        )
        .unwrap();
        let rows = self
            .by_type
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once(("total", &self.overall)));
        for (name, t) in rows {
            writeln!(
                s,
                "{:<14} {:>9} {:>9} {:>9} {:>7}",
                name,
                t.correct,
                t.incorrect,
                t.total,
                fmt_pct(t.accuracy_pct)
            )
            .unwrap();
        }
        s
    }
}

fn fmt_pct(p: Option<f64>) -> String {
    p.map_or_else(|| "-".into(), |v| format!("{v:.1}"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeCounts {
    pub correct: usize,
    pub incorrect: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityCounts {
    pub total: usize,
    pub correct: usize,
}

/// Input of counts mode: either aggregated tallies or raw verdicts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountsFile {
    pub by_type: BTreeMap<QuestionType, TypeCounts>,
    pub by_modality: BTreeMap<String, ModalityCounts>,
    pub verdicts: Vec<Verdict>,
}

impl CountsFile {
    pub fn into_report(self) -> Result<EvalReport> {
        if !self.verdicts.is_empty() {
            if !self.by_type.is_empty() || !self.by_modality.is_empty() {
                return Err(Error::Config(
                    "counts file must hold either verdicts or tallies, not both".into(),
                ));
            }
            return EvalReport::from_verdicts(self.verdicts);
        }
        EvalReport::from_counts(&self)
    }
}

/// Greedy-decodes every record and scores it.
pub fn evaluate(
    model: &VlmModel,
    records: &[VqaRecord],
    images: &ImageBank,
    rules: &NormalizationRules,
    gen: &GenerationParams,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Contract("accuracy is undefined for zero records".into()));
    }
    let mut verdicts = Vec::with_capacity(records.len());
    for r in records {
        if r.options.is_some() {
            return Err(Error::Contract(format!(
                "record `{}` still has options; reformulate first",
                r.question_id
            )));
        }
        let image = images.get(&r.image_path)?;
        let ids = model.generate(Some(image), &tokenize(&r.question), gen)?;
        let prediction = detokenize(&ids);
        verdicts.push(Verdict {
            question_id: r.question_id.clone(),
            correct: exact_match(&prediction, &r.gt_answer, rules),
            prediction,
            gt: r.gt_answer.clone(),
            question_type: classify_question_type(r),
            modality: r.modality_or_unknown().to_string(),
        });
    }
    EvalReport::from_verdicts(verdicts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Writes the report. JSON goes to `path`; CSV writes the question-type table
/// to `path` and the modality table next to it with a `-modality` suffix.
/// Returns the files written.
pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    match format {
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(report).expect("report serializes");
            text.push('\n');
            std::fs::write(path, text)?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Csv => {
            let mut types = String::from("question_type,correct,incorrect,total,accuracy_pct\n");
            for (k, t) in &report.by_type {
                writeln!(
                    types,
                    "{},{},{},{},{}",
                    k.as_str(),
                    t.correct,
                    t.incorrect,
                    t.total,
                    fmt_pct(t.accuracy_pct)
                )
                .unwrap();
            }
            let o = &report.overall;
            writeln!(
                types,
                "total,{},{},{},{}",
                o.correct,
                o.incorrect,
                o.total,
                fmt_pct(o.accuracy_pct)
            )
            .unwrap();

            let mut modalities = String::from("modality,total,correct,accuracy_pct\n");
            for (m, t) in &report.by_modality {
                writeln!(
                    modalities,
                    "{},{},{},{}",
                    csv_field(m),
                    t.total,
                    t.correct,
                    fmt_pct(t.accuracy_pct)
                )
                .unwrap();
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
            let second = path.with_file_name(format!("{stem}-modality.csv"));
            std::fs::write(path, types)?;
            std::fs::write(&second, modalities)?;
            Ok(vec![path.to_path_buf(), second])
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
