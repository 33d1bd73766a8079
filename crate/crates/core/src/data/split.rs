use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::record::VqaRecord;
use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_RATIO: f64 = 0.70;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<VqaRecord>,
    pub test: Vec<VqaRecord>,
    pub seed: u64,
    pub ratio: f64,
}

fn stratum_seed(seed: u64, stratum: &str) -> u64 {
    // FNV-1a over the stratum name, so a stratum's shuffle does not depend on
    // which other strata are present.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stratum.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}

/// Splits records into train/test by image, stratified by modality.
///
/// All records sharing an `image_path` land on the same side. Within each
/// modality the image groups are shuffled with a seeded generator and assigned
/// to train greedily until the train record count is as close as possible to
/// `ratio × stratum size`. Both sides are returned sorted by `question_id`.
pub fn split(records: &[VqaRecord], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if records.is_empty() {
        return Err(Error::Contract("cannot split an empty record list".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    // modality -> image_path -> records
    let mut strata: BTreeMap<&str, BTreeMap<&str, Vec<&VqaRecord>>> = BTreeMap::new();
    let mut image_modality: BTreeMap<&str, &str> = BTreeMap::new();
    let mut sorted: Vec<&VqaRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    for r in sorted {
        // An image belongs to the stratum of its first record.
        let m = *image_modality
            .entry(&r.image_path)
            .or_insert_with(|| r.modality_or_unknown());
        strata.entry(m).or_default().entry(&r.image_path).or_default().push(r);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (modality, groups) in strata {
        let mut groups: Vec<Vec<&VqaRecord>> = groups.into_values().collect();
        let total: usize = groups.iter().map(Vec::len).sum();
        let target = (ratio * total as f64).round() as i64;
        let mut rng = ChaCha8Rng::seed_from_u64(stratum_seed(seed, modality));
        groups.shuffle(&mut rng);
        let mut taken: i64 = 0;
        for g in groups {
            let n = g.len() as i64;
            if (taken + n - target).abs() < (taken - target).abs() {
                taken += n;
                train.extend(g.into_iter().cloned());
            } else {
                test.extend(g.into_iter().cloned());
            }
        }
    }
    train.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    test.sort_by(|a, b| a.question_id.cmp(&b.question_id));
    Ok(DatasetSplit {
        train,
        test,
        seed,
        ratio,
    })
}
