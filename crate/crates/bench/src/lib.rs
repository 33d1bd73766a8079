//! Shared fixtures for the benchmarks under `benches/`.

pub use medvqa_core as core;

use medvqa_core::data::{generate_synthetic, tokenize, ImageBank, SyntheticCorpus, SyntheticSpec};
use medvqa_core::model::{answer_ids, LmConfig, VisionConfig, VlmModel, VqaSample};
use medvqa_core::Tensor;

/// Deterministic `rows x cols` matrix with entries in [-1, 1].
pub fn matrix(rows: usize, cols: usize, phase: f64) -> Tensor {
    let data = (0..rows * cols).map(|i| (i as f64 * 0.37 + phase).sin()).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

pub fn default_model(seed: u64) -> VlmModel {
    VlmModel::new(VisionConfig::default(), LmConfig::default(), seed).expect("default config is valid")
}

/// 16 synthetic images, 32 QA pairs.
pub fn corpus() -> (SyntheticCorpus, ImageBank) {
    let c = generate_synthetic(&SyntheticSpec {
        num_images: 16,
        ..Default::default()
    })
    .expect("default synthetic spec is valid");
    let bank = ImageBank::from_corpus(&c);
    (c, bank)
}

/// Tokenized question and answer ids for the first `n` records.
pub fn encoded(c: &SyntheticCorpus, n: usize) -> Vec<(usize, Vec<usize>, Vec<usize>)> {
    c.records
        .iter()
        .take(n)
        .map(|r| {
            let img = c
                .images
                .iter()
                .position(|(p, _)| *p == r.image_path)
                .expect("image present");
            (img, tokenize(&r.question), answer_ids(&r.gt_answer))
        })
        .collect()
}

pub fn samples<'a>(c: &'a SyntheticCorpus, enc: &'a [(usize, Vec<usize>, Vec<usize>)]) -> Vec<VqaSample<'a>> {
    enc.iter()
        .map(|(img, q, a)| VqaSample {
            image: Some(&c.images[*img].1),
            question_ids: q,
            answer_ids: a,
        })
        .collect()
}
