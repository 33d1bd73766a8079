use std::collections::{BTreeMap, BTreeSet};

use medvqa_core::data::tokenizer::{detokenize_bytes, tokenize_bytes};
use medvqa_core::data::{
    detokenize, parse_dataset, reformulate, reformulate_all, split, tokenize, QuestionType, VqaRecord,
};
use medvqa_core::eval::{exact_match, normalize, normalize_default, NormalizationRules};
use medvqa_core::Error;
use proptest::prelude::*;

const MODALITIES: [&str; 4] = ["CT", "MRI", "X-Ray", "OCT"];

fn record_strategy() -> impl Strategy<Value = VqaRecord> {
    (
        0usize..4,
        prop::collection::vec("[a-z ]{1,12}", 2..5),
        any::<prop::sample::Index>(),
        any::<bool>(),
        "[A-Za-z ?]{1,30}",
    )
        .prop_map(|(m, texts, pick, with_options, question)| {
            let mut r = VqaRecord::new("", "", question, "");
            r.modality = Some(MODALITIES[m].into());
            if with_options {
                let keys = ["A", "B", "C", "D", "E"];
                r = r.with_options(keys.iter().zip(&texts).map(|(k, t)| (*k, t.clone())));
                r.gt_answer = keys[pick.index(texts.len())].into();
            } else {
                r.gt_answer = texts[pick.index(texts.len())].clone();
            }
            r
        })
}

/// `n` records with distinct ids and images.
fn corpus(n: usize) -> impl Strategy<Value = Vec<VqaRecord>> {
    prop::collection::vec(record_strategy(), n).prop_map(|mut rs| {
        for (i, r) in rs.iter_mut().enumerate() {
            r.question_id = format!("q{i:05}");
            r.image_path = format!("img/{i:05}.png");
        }
        rs
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn normalize_is_idempotent(s in "[ a-zA-Z.\\t\\n0-9ÄéÖ]{0,24}") {
        let once = normalize_default(&s);
        prop_assert_eq!(normalize_default(&once), once.clone());
        prop_assert!(!once.ends_with('.') && !once.ends_with(' '));
        prop_assert!(!once.contains("  "));
    }

    #[test]
    fn tokenizer_round_trips_bytes(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let ids = tokenize_bytes(&bytes);
        prop_assert!(ids.iter().all(|&i| i < 256));
        prop_assert_eq!(detokenize_bytes(&ids), bytes);
    }

    #[test]
    fn tokenizer_round_trips_text(s in "\\PC{0,20}") {
        prop_assert_eq!(detokenize(&tokenize(&s)), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn reformulation_idempotent_and_count_preserving(records in corpus(1000)) {
        let with_options = records.iter().filter(|r| r.options.is_some()).count();
        let (once, stats) = reformulate_all(&records).unwrap();
        prop_assert_eq!(once.len(), records.len());
        prop_assert_eq!(stats.converted, with_options);
        prop_assert_eq!(stats.passed_through, records.len() - with_options);
        prop_assert!(once.iter().all(|r| r.options.is_none()));
        let (twice, stats2) = reformulate_all(&once).unwrap();
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(stats2.converted, 0);
        for (a, b) in records.iter().zip(&once) {
            prop_assert_eq!(&a.question_id, &b.question_id);
            prop_assert_eq!(&a.question, &b.question);
            prop_assert_eq!(&a.modality, &b.modality);
            if let Some(opts) = &a.options {
                prop_assert_eq!(&opts[&a.gt_answer], &b.gt_answer);
            }
        }
    }

    #[test]
    fn split_is_deterministic_disjoint_and_stratified(records in corpus(1000), seed in any::<u64>()) {
        let s = split(&records, 0.7, seed).unwrap();
        prop_assert_eq!(&s, &split(&records, 0.7, seed).unwrap());
        prop_assert_eq!(s.train.len() + s.test.len(), records.len());
        let train_imgs: BTreeSet<&str> = s.train.iter().map(|r| r.image_path.as_str()).collect();
        prop_assert!(s.test.iter().all(|r| !train_imgs.contains(r.image_path.as_str())));
        let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for r in &records {
            per.entry(r.modality_or_unknown()).or_default().0 += 1;
        }
        for r in &s.train {
            per.entry(r.modality_or_unknown()).or_default().1 += 1;
        }
        for (m, (total, train)) in per {
            let want = (0.7 * total as f64).round() as i64;
            prop_assert!((train as i64 - want).abs() <= 1, "{m}: {train} of {total}");
        }
    }
}

#[test]
fn split_keeps_image_groups_together() {
    let mut records = Vec::new();
    for i in 0..60 {
        for j in 0..(1 + i % 3) {
            records.push(
                VqaRecord::new(format!("q{i:03}-{j}"), format!("img{i}.png"), "Q?", "yes")
                    .with_modality(MODALITIES[i % 2]),
            );
        }
    }
    let a = split(&records, 0.7, 1).unwrap();
    let b = split(&records, 0.7, 2).unwrap();
    assert_ne!(a.train, b.train);
    let train: BTreeSet<&str> = a.train.iter().map(|r| r.image_path.as_str()).collect();
    assert!(a.test.iter().all(|r| !train.contains(r.image_path.as_str())));
    let mut sorted = a.train.clone();
    sorted.sort_by(|x, y| x.question_id.cmp(&y.question_id));
    assert_eq!(sorted, a.train);
}

#[test]
fn split_rejects_bad_inputs() {
    let r = vec![VqaRecord::new("q", "i", "Q", "yes")];
    assert!(matches!(split(&[], 0.7, 0), Err(Error::Contract(_))));
    assert!(matches!(split(&r, 1.5, 0), Err(Error::Config(_))));
}

#[test]
fn dangling_option_key_is_an_error() {
    let r = VqaRecord::new("q7", "i.png", "Q?", "Z").with_options([("A", "x")]);
    assert!(matches!(reformulate(&r), Err(Error::DanglingAnswer { .. })));
}

#[test]
fn dataset_parse_preserves_unknown_fields() {
    let text = r#"[{"question_id":"1","image_path":"a.png","question":"Q?","gt_answer":"Yes","modality":"CT","source":"x","score":3}]"#;
    let rs = parse_dataset(text).unwrap();
    assert_eq!(rs[0].extra["source"], "x");
    assert_eq!(rs[0].question_type(), QuestionType::Yesno);
    let again = parse_dataset(&serde_json::to_string(&rs).unwrap()).unwrap();
    assert_eq!(again, rs);
}

#[test]
fn dataset_parse_errors_are_typed() {
    assert!(matches!(parse_dataset("[{"), Err(Error::Parse { .. })));
    let missing = r#"[{"question_id":"9","image_path":"a.png","question":"Q?"}]"#;
    match parse_dataset(missing) {
        Err(Error::Schema { field, question_id }) => {
            assert_eq!(field, "gt_answer");
            assert_eq!(question_id, "9");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn normalization_examples() {
    let rules = NormalizationRules::default();
    assert_eq!(
        normalize("  Interstitial   Lung Disease. ", &rules),
        "interstitial lung disease"
    );
    assert!(exact_match("Yes.", "yes", &rules));
    assert!(!exact_match("yes", "no", &rules));
    let keep_case = NormalizationRules {
        lowercase: false,
        ..Default::default()
    };
    assert_eq!(normalize("MRI.", &keep_case), "MRI");
}
