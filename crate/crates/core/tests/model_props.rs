use medvqa_core::data::tokenizer::{BOS, EOS, IMG, PAD};
use medvqa_core::data::{tokenize, GrayImage};
use medvqa_core::gradsuite::tiny_model_configs;
use medvqa_core::lora::LoraConfig;
use medvqa_core::model::{answer_ids, GenerationParams, LmConfig, VisionConfig, VlmModel, VqaSample};
use medvqa_core::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(size: usize, phase: f64) -> GrayImage {
    GrayImage::new(
        size,
        size,
        (0..size * size)
            .map(|i| ((i as f64 * 0.13 + phase).sin() + 1.0) / 2.0)
            .collect(),
    )
    .unwrap()
}

fn fused_logits(model: &VlmModel, img: &GrayImage, q: &[usize], a: &[usize]) -> Tensor {
    let mut t = Tape::new();
    let f = model.encode_image(&mut t, img).unwrap();
    let seq = model.fuse(&mut t, Some(f), q).unwrap();
    let seq = model.extend_with_tokens(&mut t, seq, a).unwrap();
    let l = model.decode(&mut t, seq.embeddings).unwrap();
    t.value(l).clone()
}

#[test]
fn adapters_are_identity_at_init() {
    let img = image(32, 0.0);
    let q = tokenize("Is there a circle?");
    for selectors in [LoraConfig::default().target_selectors, vec!["*".to_string()]] {
        let mut model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 4).unwrap();
        let before = fused_logits(&model, &img, &q, &[b'n' as usize]);
        model
            .attach_lora(&LoraConfig {
                target_selectors: selectors,
                ..Default::default()
            })
            .unwrap();
        let after = fused_logits(&model, &img, &q, &[b'n' as usize]);
        assert_eq!(before.data(), after.data());
    }
}

#[test]
fn attach_leaves_only_adapters_trainable() {
    let mut model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 0).unwrap();
    let n = model.attach_lora(&LoraConfig::default()).unwrap();
    assert_eq!(n, 2 * LmConfig::default().depth);
    for (name, t) in model.params.iter() {
        let adapter = name.ends_with(".lora_a") || name.ends_with(".lora_b");
        assert_eq!(t.requires_grad(), adapter, "{name}");
    }
    let (_, trainable) = model.count_parameters();
    assert_eq!(trainable, n * 8 * (64 + 64));
    assert!(matches!(
        model.attach_lora(&LoraConfig::default()),
        Err(Error::Config(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn merge_matches_adapted_forward(seed in any::<u64>(), rank in 1usize..5, alpha in 0.5f64..64.0, all in any::<bool>()) {
        let (vc, lc) = tiny_model_configs();
        let mut model = VlmModel::new(vc, lc, seed).unwrap();
        let selectors = if all { vec!["*".into()] } else { LoraConfig::default().target_selectors };
        model.attach_lora(&LoraConfig { rank: rank.min(4), alpha, target_selectors: selectors }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in model.params.iter_mut() {
            if name.ends_with(".lora_b") || name.ends_with(".lora_a") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let img = image(8, seed as f64 * 1e-3);
        let q = tokenize("What?");
        let adapted = fused_logits(&model, &img, &q, &[b'a' as usize]);
        model.merge_lora().unwrap();
        prop_assert!(model.params.names().all(|n| !n.contains(".lora_")));
        let merged = fused_logits(&model, &img, &q, &[b'a' as usize]);
        prop_assert!(adapted.max_abs_diff(&merged) <= 1e-10, "diff {}", adapted.max_abs_diff(&merged));
    }
}

#[test]
fn rank8_alpha32_scaling() {
    let cfg = LoraConfig {
        rank: 8,
        alpha: 32.0,
        ..Default::default()
    };
    assert_eq!(cfg.scaling(), 4.0);
}

#[test]
fn init_loss_near_uniform() {
    let model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 0).unwrap();
    let img = image(32, 0.5);
    let q = tokenize("What type of abnormality is present in this image?");
    let a = answer_ids("circle");
    let loss = model
        .forward_loss(&[VqaSample {
            image: Some(&img),
            question_ids: &q,
            answer_ids: &a,
        }])
        .unwrap();
    assert!((loss - 260f64.ln()).abs() < 0.05, "{loss}");
}

#[test]
fn trailing_pad_does_not_change_loss() {
    let model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 1).unwrap();
    let img = image(32, 0.2);
    let q = tokenize("Is there a square present in this image?");
    let plain = answer_ids("yes");
    let mut padded = plain.clone();
    padded.extend([PAD; 5]);
    let loss = |a: &[usize]| {
        model
            .forward_loss(&[VqaSample {
                image: Some(&img),
                question_ids: &q,
                answer_ids: a,
            }])
            .unwrap()
    };
    assert!((loss(&plain) - loss(&padded)).abs() < 1e-12);
}

#[test]
fn answer_contract_enforced() {
    let model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 1).unwrap();
    let q = tokenize("Q?");
    let run = |a: &[usize]| {
        let mut t = Tape::new();
        model
            .sample_loss(
                &mut t,
                &VqaSample {
                    image: None,
                    question_ids: &q,
                    answer_ids: a,
                },
            )
            .map(|(_, n)| n)
    };
    assert!(matches!(run(&[]), Err(Error::EmptyObjective)));
    assert!(matches!(run(&[1, 2]), Err(Error::Contract(_))));
    assert!(matches!(run(&[1, EOS, 5]), Err(Error::Contract(_))));
    assert_eq!(run(&[1, EOS, PAD]).unwrap(), 2);
}

#[test]
fn empty_prefix_equals_text_only_decoding() {
    let model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 2).unwrap();
    let q = tokenize("no image here");
    let mut t = Tape::new();
    let seq = model.fuse(&mut t, None, &q).unwrap();
    let a = model.decode(&mut t, seq.embeddings).unwrap();
    let mut ids = vec![IMG, BOS];
    ids.extend(&q);
    let b = model.token_logits(&mut t, &ids).unwrap();
    assert_eq!(t.value(a).data(), t.value(b).data());
}

#[test]
fn image_prefix_changes_only_later_positions_causally() {
    let model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 3).unwrap();
    let q = tokenize("Which?");
    let a = fused_logits(&model, &image(32, 0.0), &q, &[]);
    let b = fused_logits(&model, &image(32, 1.0), &q, &[]);
    // Position 0 is the image marker and sees nothing else.
    assert_eq!(a.row(0), b.row(0));
    assert_ne!(a.row(a.rows() - 1), b.row(b.rows() - 1));
}

#[test]
fn same_seed_same_model_and_generation() {
    let a = VlmModel::new(VisionConfig::default(), LmConfig::default(), 9).unwrap();
    let b = VlmModel::new(VisionConfig::default(), LmConfig::default(), 9).unwrap();
    let c = VlmModel::new(VisionConfig::default(), LmConfig::default(), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
    let img = image(32, 0.3);
    let q = tokenize("What?");
    let g = GenerationParams { max_new_tokens: 4 };
    let out = a.generate(Some(&img), &q, &g).unwrap();
    assert_eq!(out, b.generate(Some(&img), &q, &g).unwrap());
    assert!(out.len() <= 4);
}

#[test]
fn context_overflow_is_reported() {
    let model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 0).unwrap();
    let img = image(32, 0.0);
    let long = vec![b'a' as usize; 250];
    let err = model
        .generate(Some(&img), &long, &GenerationParams::default())
        .unwrap_err();
    assert!(matches!(err, Error::ContextLength { max: 256, .. }), "{err}");
    let a = answer_ids("x");
    let err = model
        .forward_loss(&[VqaSample {
            image: Some(&img),
            question_ids: &long,
            answer_ids: &a,
        }])
        .unwrap_err();
    assert!(matches!(err, Error::ContextLength { .. }));
}

#[test]
fn wrong_image_size_rejected() {
    let model = VlmModel::new(VisionConfig::default(), LmConfig::default(), 0).unwrap();
    let mut t = Tape::new();
    assert!(matches!(
        model.encode_image(&mut t, &image(16, 0.0)),
        Err(Error::Shape { .. })
    ));
}
