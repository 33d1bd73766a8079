//! Dataset records, reformulation, splitting, tokenization and synthetic data.

mod image;
mod record;
mod split;
mod synthetic;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use image::GrayImage;
pub use record::{
    classify_answer, load_dataset, parse_dataset, reformulate, reformulate_all, save_dataset, QuestionType,
    ReformulateStats, VqaRecord, UNKNOWN_MODALITY,
};
pub use split::{split, DatasetSplit, DEFAULT_TRAIN_RATIO};
pub use synthetic::{generate_synthetic, yes_no_question, Shape, SyntheticCorpus, SyntheticSpec, OPEN_QUESTION};
pub use tokenizer::{detokenize, tokenize};

use crate::error::{Error, Result};

/// Images keyed by the `image_path` that records use to refer to them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageBank {
    images: BTreeMap<String, GrayImage>,
}

impl ImageBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, image: GrayImage) {
        self.images.insert(path.into(), image);
    }

    pub fn get(&self, path: &str) -> Result<&GrayImage> {
        self.images.get(path).ok_or_else(|| Error::Image {
            path: path.to_string(),
            message: "image not loaded".into(),
        })
    }

    /// Loads every distinct image referenced by `records`, resolving paths against `base`.
    pub fn load_for(records: &[VqaRecord], base: &Path) -> Result<Self> {
        let mut bank = ImageBank::new();
        for r in records {
            if !bank.images.contains_key(&r.image_path) {
                let img = GrayImage::load(&base.join(&r.image_path))?;
                bank.insert(r.image_path.clone(), img);
            }
        }
        Ok(bank)
    }

    pub fn from_corpus(corpus: &SyntheticCorpus) -> Self {
        let mut bank = ImageBank::new();
        for (p, img) in &corpus.images {
            bank.insert(p.clone(), img.clone());
        }
        bank
    }
}

/// Index batches for one epoch: a seeded shuffle of `0..n` cut into chunks of
/// `batch_size`, keeping the final short chunk. Pure in `(seed, epoch)`.
pub fn batch_order(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Borrowed batches of `records` in [`batch_order`].
pub fn batch_iterator<T>(records: &[T], batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Vec<&T>> {
    batch_order(records.len(), batch_size, seed, epoch)
        .into_iter()
        .map(move |b| b.into_iter().map(|i| &records[i]).collect())
}
