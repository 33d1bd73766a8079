//! JSON run configuration. Every section has defaults; unknown keys are errors.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use medvqa_core::eval::{NormalizationRules, ReportFormat};
use medvqa_core::lora::LoraConfig;
use medvqa_core::model::{GenerationParams, LmConfig, VisionConfig};
use medvqa_core::optim::{AdamWConfig, LrMultiplier, ScheduleConfig, TrainHyperparams};
use medvqa_core::train::{StageId, StagePlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub model: ModelSection,
    pub lora: LoraConfig,
    pub optim: OptimSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("run"),
            model: ModelSection::default(),
            lora: LoraConfig::default(),
            optim: OptimSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vision: VisionConfig,
    pub lm: LmConfig,
}

/// AdamW coefficients plus the default schedule shared by all stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_grad_norm: Option<f64>,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub min_lr: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamWConfig::default();
        let s = ScheduleConfig::default();
        OptimSection {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            clip_grad_norm: a.clip_grad_norm,
            base_lr: s.base_lr,
            warmup_steps: s.warmup_steps,
            min_lr: s.min_lr,
        }
    }
}

impl OptimSection {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_grad_norm: self.clip_grad_norm,
            lr_multipliers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: PathBuf,
    /// Held-out records for the per-epoch test loss.
    pub test: Option<PathBuf>,
    /// Directory that record `image_path`s are relative to; defaults to the
    /// directory holding `train`.
    pub image_root: Option<PathBuf>,
}

impl DataSection {
    pub fn image_root(&self) -> PathBuf {
        self.image_root
            .clone()
            .unwrap_or_else(|| self.train.parent().map(Path::to_path_buf).unwrap_or_default())
    }
}

/// Per-stage overrides; unset fields fall back to the `optim` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSettings {
    pub steps: u64,
    pub base_lr: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub min_lr: Option<f64>,
    pub lr_multipliers: Vec<LrMultiplier>,
}

impl StageSettings {
    fn with_steps(steps: u64) -> Self {
        StageSettings {
            steps,
            base_lr: None,
            warmup_steps: None,
            min_lr: None,
            lr_multipliers: Vec::new(),
        }
    }
}

impl Default for StageSettings {
    fn default() -> Self {
        StageSettings::with_steps(300)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesSection {
    pub vision_pretrain: StageSettings,
    pub text_lora: StageSettings,
    pub joint_finetune: StageSettings,
}

impl Default for StagesSection {
    fn default() -> Self {
        StagesSection {
            vision_pretrain: StageSettings::with_steps(300),
            text_lora: StageSettings::with_steps(300),
            joint_finetune: StageSettings::with_steps(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    /// Extra checkpoints every this many steps; one is always written at stage end.
    pub checkpoint_every: Option<u64>,
    pub stages: StagesSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let h = TrainHyperparams::default();
        TrainSection {
            batch_size: h.batch_size,
            grad_accum_steps: h.grad_accum_steps,
            checkpoint_every: None,
            stages: StagesSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub normalization: NormalizationRules,
    pub generation: GenerationParams,
    pub format: ReportFormat,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            normalization: NormalizationRules::default(),
            generation: GenerationParams::default(),
            format: ReportFormat::Json,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| crate::Invalid(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.vision.validate()?;
        self.model.lm.validate()?;
        self.hyperparams().validate()?;
        for stage in StageId::ALL {
            self.plan(stage).schedule.validate()?;
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> TrainHyperparams {
        TrainHyperparams {
            batch_size: self.train.batch_size,
            grad_accum_steps: self.train.grad_accum_steps,
            seed: self.seed,
        }
    }

    pub fn stage_settings(&self, stage: StageId) -> &StageSettings {
        let s = &self.train.stages;
        match stage {
            StageId::VisionPretrain => &s.vision_pretrain,
            StageId::TextLora => &s.text_lora,
            StageId::JointFinetune => &s.joint_finetune,
        }
    }

    pub fn plan(&self, stage: StageId) -> StagePlan {
        let st = self.stage_settings(stage);
        let o = &self.optim;
        let schedule = ScheduleConfig {
            base_lr: st.base_lr.unwrap_or(o.base_lr),
            warmup_steps: st.warmup_steps.unwrap_or(o.warmup_steps),
            total_steps: st.steps.max(1),
            min_lr: st.min_lr.unwrap_or(o.min_lr),
        };
        StagePlan::standard(stage, st.steps, &schedule).with_lr_multipliers(st.lr_multipliers.clone())
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        let path = dir.join("config.resolved.json");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"optim": {"lr": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"model": {"lm": {"depth": 2}}}"#).unwrap();
        assert_eq!(cfg.model.lm.depth, 2);
        assert_eq!(cfg.model.lm.embed_dim, 64);
    }

    #[test]
    fn stage_overrides_fall_back_to_optim() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"optim": {"base_lr": 0.5}, "train": {"stages": {"joint_finetune": {"steps": 40, "warmup_steps": 4}}}}"#,
        )
        .unwrap();
        let p = cfg.plan(StageId::JointFinetune);
        assert_eq!((p.steps, p.schedule.base_lr, p.schedule.warmup_steps), (40, 0.5, 4));
        let v = cfg.plan(StageId::VisionPretrain);
        assert_eq!((v.steps, v.schedule.warmup_steps), (300, 100));
    }

    #[test]
    fn resolved_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
    }
}
