//! Checkpoint directories: `manifest.json`, `params.bin` (f32 LE) and `optim.bin` (f64 LE).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{StageId, StagePlan, StageProgress, TrainLog};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{LmConfig, VisionConfig, VlmModel};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const OPTIM: &str = "optim.bin";

pub fn checkpoint_dir_name(stage: StageId, step: u64) -> String {
    format!("ckpt-{}-{step}", stage.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainable: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerManifest {
    pub config: AdamWConfig,
    pub step_count: u64,
    /// Moments stored as `<param>.m` / `<param>.v`.
    pub entries: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub vision: VisionConfig,
    pub lm: LmConfig,
    pub model_seed: u64,
    pub lora: Option<LoraConfig>,
    pub params: Vec<ParamEntry>,
    pub stage: StageId,
    pub step: u64,
    pub plan: StagePlan,
    pub optimizer: OptimizerManifest,
    pub seed: u64,
    pub log: TrainLog,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: VlmModel,
    pub progress: StageProgress,
}

fn layout<'a>(
    items: impl Iterator<Item = (&'a str, &'a [usize], Option<bool>)>,
    width: u64,
    dtype: &str,
) -> Vec<ParamEntry> {
    let mut offset = 0;
    items
        .map(|(name, shape, trainable)| {
            let e = ParamEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
                dtype: dtype.to_string(),
                trainable,
            };
            offset += width * shape.iter().product::<usize>() as u64;
            e
        })
        .collect()
}

/// Writes a checkpoint atomically: everything goes to a sibling temporary
/// directory that is renamed into place at the end. Parameters are stored as
/// `f32`; callers wanting bit-exact resume should round the model first.
pub fn save_checkpoint(dir: &Path, model: &VlmModel, progress: &StageProgress, seed: u64) -> Result<()> {
    let params = layout(
        model
            .params
            .iter()
            .map(|(n, t)| (n, t.shape(), Some(t.requires_grad()))),
        4,
        "f32",
    );
    let mut blob = Vec::new();
    for (_, t) in model.params.iter() {
        for v in t.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }

    let opt = &progress.optimizer;
    let moments: Vec<(String, &Vec<f64>)> = opt
        .m
        .iter()
        .map(|(n, m)| (format!("{n}.m"), m))
        .chain(opt.v.iter().map(|(n, v)| (format!("{n}.v"), v)))
        .collect();
    let shapes: Vec<[usize; 1]> = moments.iter().map(|(_, m)| [m.len()]).collect();
    let entries = layout(
        moments
            .iter()
            .zip(&shapes)
            .map(|((n, _), s)| (n.as_str(), &s[..], None)),
        8,
        "f64",
    );
    let mut optim_blob = Vec::new();
    for (_, m) in &moments {
        for v in m.iter() {
            optim_blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        vision: model.vision_cfg.clone(),
        lm: model.lm_cfg.clone(),
        model_seed: model.seed,
        lora: model.lora.clone(),
        params,
        stage: progress.plan.stage,
        step: progress.step,
        plan: progress.plan.clone(),
        optimizer: OptimizerManifest {
            config: opt.cfg.clone(),
            step_count: opt.step_count,
            entries,
        },
        seed,
        log: progress.log.clone(),
    };

    let tmp = tmp_sibling(dir);
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(tmp.join(MANIFEST), text)?;
    std::fs::write(tmp.join(PARAMS), blob)?;
    std::fs::write(tmp.join(OPTIM), optim_blob)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(())
}

fn tmp_sibling(dir: &Path) -> PathBuf {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt");
    dir.with_file_name(format!(".{name}.partial"))
}

/// Checks that entries tile `blob_len` exactly, in order, and returns each
/// entry's element count.
fn check_tiling(entries: &[ParamEntry], width: u64, dtype: &str, blob_len: u64, file: &str) -> Result<Vec<usize>> {
    let mut expected = 0u64;
    let mut counts = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != dtype {
            return Err(Error::Integrity(format!(
                "{file}: `{}` has dtype {}, expected {dtype}",
                e.name, e.dtype
            )));
        }
        if e.offset != expected {
            return Err(Error::Integrity(format!(
                "{file}: `{}` starts at byte {}, expected {expected}",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        expected += width * n as u64;
        counts.push(n);
    }
    if expected != blob_len {
        return Err(Error::Integrity(format!(
            "{file} holds {blob_len} bytes but the manifest describes {expected}"
        )));
    }
    Ok(counts)
}

/// Loads and validates a checkpoint. Nothing is returned unless every part checks out.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(dir.join(MANIFEST))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{MANIFEST}: {e}")))?;
    let found = raw.get("format_version").and_then(serde_json::Value::as_u64);
    match found {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Version {
                found: v as u32,
                supported: FORMAT_VERSION,
            })
        }
        None => return Err(Error::Integrity(format!("{MANIFEST}: missing format_version"))),
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("{MANIFEST}: {e}")))?;

    let blob = std::fs::read(dir.join(PARAMS))?;
    let counts = check_tiling(&manifest.params, 4, "f32", blob.len() as u64, PARAMS)?;
    let mut store = ParamStore::new();
    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    for (e, n) in manifest.params.iter().zip(counts) {
        let data: Vec<f64> = floats.by_ref().take(n).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!("`{}` contains non-finite values", e.name)));
        }
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|_| Error::Integrity(format!("bad shape for `{}`", e.name)))?
            .with_requires_grad(e.trainable.unwrap_or(false));
        store
            .insert(e.name.clone(), t)
            .map_err(|_| Error::Integrity(format!("duplicate parameter `{}`", e.name)))?;
    }

    let optim_blob = match std::fs::read(dir.join(OPTIM)) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let om = &manifest.optimizer;
    let counts = check_tiling(&om.entries, 8, "f64", optim_blob.len() as u64, OPTIM)?;
    let mut optimizer = AdamW::new(om.config.clone());
    optimizer.step_count = om.step_count;
    let mut doubles = optim_blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (e, n) in om.entries.iter().zip(counts) {
        let data: Vec<f64> = doubles.by_ref().take(n).collect();
        if let Some(p) = e.name.strip_suffix(".m") {
            optimizer.m.insert(p.to_string(), data);
        } else if let Some(p) = e.name.strip_suffix(".v") {
            optimizer.v.insert(p.to_string(), data);
        } else {
            return Err(Error::Integrity(format!("{OPTIM}: unexpected entry `{}`", e.name)));
        }
    }

    let model = VlmModel::from_params(
        manifest.vision.clone(),
        manifest.lm.clone(),
        manifest.model_seed,
        manifest.lora.clone(),
        store,
    )?;
    let progress = StageProgress {
        plan: manifest.plan.clone(),
        step: manifest.step,
        optimizer,
        log: manifest.log.clone(),
    };
    Ok(Checkpoint {
        manifest,
        model,
        progress,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::ScheduleConfig;

    fn tiny() -> VlmModel {
        VlmModel::new(
            VisionConfig {
                image_size: 8,
                patch_size: 4,
                embed_dim: 8,
                depth: 1,
                num_heads: 2,
                ..Default::default()
            },
            LmConfig {
                embed_dim: 8,
                depth: 1,
                num_heads: 2,
                context_len: 32,
                ..Default::default()
            },
            3,
        )
        .unwrap()
    }

    fn progress() -> StageProgress {
        let plan = StagePlan::standard(StageId::JointFinetune, 5, &ScheduleConfig::default());
        StageProgress::start(plan, AdamWConfig::default())
    }

    #[test]
    fn round_trip_preserves_rounded_params() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny();
        model.params.round_to_f32();
        let mut p = progress();
        p.optimizer.m.insert("projector.bias".into(), vec![0.1; 8]);
        p.optimizer.v.insert("projector.bias".into(), vec![0.2; 8]);
        p.optimizer.step_count = 7;
        let path = dir.path().join("ck");
        save_checkpoint(&path, &model, &p, 11).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.model.params, model.params);
        assert_eq!(ck.progress, p);
        assert_eq!(ck.manifest.seed, 11);
    }

    #[test]
    fn truncated_blob_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        save_checkpoint(&path, &tiny(), &progress(), 0).unwrap();
        let blob = std::fs::read(path.join(PARAMS)).unwrap();
        std::fs::write(path.join(PARAMS), &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Integrity(_))));
    }

    #[test]
    fn future_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck");
        save_checkpoint(&path, &tiny(), &progress(), 0).unwrap();
        let text = std::fs::read_to_string(path.join(MANIFEST)).unwrap();
        std::fs::write(
            path.join(MANIFEST),
            text.replacen("\"format_version\": 1", "\"format_version\": 9", 1),
        )
        .unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Version { found: 9, .. })));
    }
}
