use medvqa_core::data::QuestionType;
use medvqa_core::eval::{emit_report, CountsFile, EvalReport, ReportFormat, Verdict};
use medvqa_core::Error;

fn reported() -> CountsFile {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/reported_counts.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn type_table_reproduces_overall() {
    let r = reported().into_report().unwrap();
    assert_eq!(r.by_type[&QuestionType::Open].accuracy_pct, Some(70.7));
    assert_eq!(r.by_type[&QuestionType::Yesno].accuracy_pct, Some(76.9));
    assert_eq!((r.overall.correct, r.overall.total), (6487, 8832));
    assert_eq!(r.overall.accuracy_pct, Some(73.4));
}

#[test]
fn modality_rows_recomputed() {
    let r = reported().into_report().unwrap();
    let want = [
        ("X-Ray", 75.0),
        ("Dermoscopy", 71.7),
        ("MRI", 68.5),
        ("OCT", 76.6),
        ("CT", 75.8),
        ("Microscopy", 77.8),
        ("Ultrasound", 76.5),
        ("Fundus", 70.6),
    ];
    for (m, pct) in want {
        assert_eq!(r.by_modality[m].accuracy_pct, Some(pct), "{m}");
    }
    let notes = r.consistency_notes();
    assert_eq!(notes.len(), 1);
    assert!(notes[0].contains("17792"), "{notes:?}");
}

#[test]
fn csv_emits_both_tables() {
    let dir = tempfile::tempdir().unwrap();
    let r = reported().into_report().unwrap();
    let files = emit_report(&r, &dir.path().join("report.csv"), ReportFormat::Csv).unwrap();
    assert_eq!(files.len(), 2);
    let types = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(types.lines().last().unwrap(), "total,6487,2345,8832,73.4");
    let mods = std::fs::read_to_string(dir.path().join("report-modality.csv")).unwrap();
    assert!(mods.lines().any(|l| l == "CT,3144,2383,75.8"), "{mods}");
}

fn verdict(id: &str, qt: QuestionType, m: &str, correct: bool) -> Verdict {
    Verdict {
        question_id: id.into(),
        prediction: String::new(),
        gt: String::new(),
        question_type: qt,
        modality: m.into(),
        correct,
    }
}

#[test]
fn verdicts_aggregate_consistently() {
    let vs = vec![
        verdict("b", QuestionType::Open, "CT", true),
        verdict("a", QuestionType::Yesno, "MRI", false),
        verdict("c", QuestionType::Yesno, "CT", true),
    ];
    let r = EvalReport::from_verdicts(vs).unwrap();
    assert_eq!(r.verdicts[0].question_id, "a");
    assert_eq!(r.overall.accuracy_pct, Some(66.7));
    assert_eq!(r.by_modality["CT"].correct, 2);
    assert!(r.consistency_notes().is_empty());
    let json = serde_json::to_value(&r).unwrap();
    assert_eq!(json["by_type"]["open"]["accuracy_pct"], 100.0);
}

#[test]
fn empty_inputs_rejected() {
    assert!(matches!(EvalReport::from_verdicts(vec![]), Err(Error::Contract(_))));
    assert!(CountsFile::default().into_report().is_err());
    let mixed = CountsFile {
        verdicts: vec![verdict("a", QuestionType::Open, "CT", true)],
        ..reported()
    };
    assert!(matches!(mixed.into_report(), Err(Error::Config(_))));
}
