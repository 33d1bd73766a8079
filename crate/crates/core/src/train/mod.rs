//! Staged training: vision pretraining, LoRA text tuning, joint fine-tuning.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batch_order, tokenize, ImageBank, QuestionType, VqaRecord};
use crate::error::{Error, Result};
use crate::eval::normalize_default;
use crate::lora::LoraConfig;
use crate::model::{answer_ids, VlmModel, VqaSample};
use crate::optim::{
    accumulate_and_step, lr_at_step, AdamW, AdamWConfig, LrMultiplier, ScheduleConfig, TrainHyperparams,
};
use crate::params::{matches_any, Initializer, ParamStore, INIT_STD};
use crate::tensor::Tape;

pub use checkpoint::{
    checkpoint_dir_name, load_checkpoint, save_checkpoint, Checkpoint, Manifest, ParamEntry, FORMAT_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    VisionPretrain,
    TextLora,
    JointFinetune,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::VisionPretrain, StageId::TextLora, StageId::JointFinetune];

    pub fn as_str(self) -> &'static str {
        match self {
            StageId::VisionPretrain => "vision_pretrain",
            StageId::TextLora => "text_lora",
            StageId::JointFinetune => "joint_finetune",
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            StageId::VisionPretrain => Objective::ImageClassification,
            StageId::TextLora => Objective::TextQa,
            StageId::JointFinetune => Objective::FusedVqa,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    ImageClassification,
    TextQa,
    FusedVqa,
}

pub const VISION_HEAD: &str = "vision_head";

/// Base (non-adapter) tensors under `prefix`.
fn base_tensors(prefix: &str) -> Vec<String> {
    ["*weight", "*bias", "*gain", "*_embed"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect()
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage: StageId,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub objective: Objective,
    pub steps: u64,
    pub schedule: ScheduleConfig,
    /// Per-pattern learning-rate factors for this stage.
    #[serde(default)]
    pub lr_multipliers: Vec<LrMultiplier>,
}

impl StagePlan {
    /// The standard selectors for `stage`. `schedule.total_steps` is set to
    /// `steps` and warmup is clamped to fit.
    pub fn standard(stage: StageId, steps: u64, schedule: &ScheduleConfig) -> Self {
        let (trainable, frozen) = match stage {
            StageId::VisionPretrain => (
                strings(&["vision.*", "vision_head.*"]),
                strings(&["projector.*", "lm.*"]),
            ),
            StageId::TextLora => {
                let mut frozen = strings(&["vision.*", "projector.*"]);
                frozen.extend(base_tensors("lm"));
                (strings(&["lm.*.lora_a", "lm.*.lora_b"]), frozen)
            }
            StageId::JointFinetune => (
                strings(&["vision.*", "projector.*", "lm.*.lora_a", "lm.*.lora_b"]),
                base_tensors("lm"),
            ),
        };
        StagePlan {
            stage,
            trainable,
            frozen,
            objective: stage.objective(),
            steps,
            schedule: ScheduleConfig {
                total_steps: steps.max(1),
                warmup_steps: schedule.warmup_steps.min(steps.max(1)),
                ..schedule.clone()
            },
            lr_multipliers: Vec::new(),
        }
    }

    pub fn with_lr_multipliers(mut self, lr_multipliers: Vec<LrMultiplier>) -> Self {
        self.lr_multipliers = lr_multipliers;
        self
    }

    /// Checks the selectors against `store` and applies them to `requires_grad`.
    pub fn apply_selectors(&self, store: &mut ParamStore) -> Result<()> {
        for pat in &self.trainable {
            if !store.names().any(|n| crate::params::glob_match(pat, n)) {
                let available: Vec<&str> = store.names().collect();
                return Err(Error::Config(format!(
                    "stage {}: trainable selector `{pat}` matches no parameter (have: {})",
                    self.stage.as_str(),
                    available.join(", ")
                )));
            }
        }
        for (name, t) in store.iter_mut() {
            let tr = matches_any(&self.trainable, name);
            let fr = matches_any(&self.frozen, name);
            if tr == fr {
                return Err(Error::Config(format!(
                    "stage {}: parameter `{name}` is {} selector",
                    self.stage.as_str(),
                    if tr {
                        "in both the trainable and the frozen"
                    } else {
                        "in neither"
                    }
                )));
            }
            t.set_requires_grad(tr);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u64,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: StageId,
    pub epochs: Vec<EpochRow>,
    pub steps: Vec<StepRow>,
}

impl TrainLog {
    pub fn new(stage: StageId) -> Self {
        TrainLog {
            stage,
            epochs: Vec::new(),
            steps: Vec::new(),
        }
    }
}

fn fmt_loss(x: f64) -> String {
    // Shortest round-trip form keeps the file byte-stable and lossless.
    format!("{x:?}")
}

/// `epoch,train_loss,test_loss`; an empty test column means no test set.
pub fn loss_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,train_loss,test_loss\n");
    for r in &log.epochs {
        let test = r.test_loss.map(fmt_loss).unwrap_or_default();
        writeln!(s, "{},{},{}", r.epoch, fmt_loss(r.train_loss), test).unwrap();
    }
    s
}

pub fn emit_loss_csv(log: &TrainLog, path: &Path) -> Result<()> {
    std::fs::write(path, loss_csv(log))?;
    Ok(())
}

/// `step,lr,loss` for every optimizer step.
pub fn steps_csv(log: &TrainLog) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in &log.steps {
        writeln!(s, "{},{},{}", r.step, fmt_loss(r.lr), fmt_loss(r.loss)).unwrap();
    }
    s
}

/// Records plus the images they refer to.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub train: &'a [VqaRecord],
    pub test: &'a [VqaRecord],
    pub images: &'a ImageBank,
}

/// Everything needed to continue a stage: position, optimizer and log so far.
#[derive(Debug, Clone, PartialEq)]
pub struct StageProgress {
    pub plan: StagePlan,
    pub step: u64,
    pub optimizer: AdamW,
    pub log: TrainLog,
}

impl StageProgress {
    /// Fresh progress; the plan's learning-rate multipliers replace any in `adamw`.
    pub fn start(plan: StagePlan, adamw: AdamWConfig) -> Self {
        let cfg = AdamWConfig {
            lr_multipliers: plan.lr_multipliers.clone(),
            ..adamw
        };
        StageProgress {
            log: TrainLog::new(plan.stage),
            plan,
            step: 0,
            optimizer: AdamW::new(cfg),
        }
    }

    pub fn finished(&self) -> bool {
        self.step >= self.plan.steps
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub lora: LoraConfig,
    pub adamw: AdamWConfig,
    /// Checkpoint directory root; checkpoints land in `ckpt-<stage>-<step>/`.
    pub checkpoint_root: Option<PathBuf>,
    /// Save every this many steps (and always at stage end when a root is set).
    pub checkpoint_every: Option<u64>,
    /// Stop once this many steps of the stage have run (simulated interruption).
    pub stop_after: Option<u64>,
}

/// Adapters and the throwaway classification head a stage needs.
fn prepare_model(model: &mut VlmModel, plan: &StagePlan, data: &StageData<'_>, opts: &RunOptions) -> Result<()> {
    match plan.objective {
        Objective::TextQa | Objective::FusedVqa => {
            if model.lora.is_none() {
                model.attach_lora(&opts.lora)?;
            }
        }
        Objective::ImageClassification => {
            let classes = class_labels(data.train);
            if classes.is_empty() {
                return Err(Error::Config(
                    "vision pretraining needs open-ended training records".into(),
                ));
            }
            let w = format!("{VISION_HEAD}.weight");
            let d = model.vision_cfg.embed_dim;
            if let Some(t) = model.params.get(&w) {
                if t.shape() != [classes.len(), d] {
                    return Err(Error::Integrity(format!(
                        "{w} does not match {} classes",
                        classes.len()
                    )));
                }
            } else {
                let mut init = Initializer::new(model.seed ^ 0x5649_5348);
                model.params.insert(w, init.normal(&[classes.len(), d], INIT_STD))?;
                model.params.insert(
                    format!("{VISION_HEAD}.bias"),
                    crate::tensor::Tensor::zeros(&[classes.len()]),
                )?;
            }
        }
    }
    Ok(())
}

fn finish_model(model: &mut VlmModel, plan: &StagePlan) {
    if plan.objective == Objective::ImageClassification {
        model.params.remove(&format!("{VISION_HEAD}.weight"));
        model.params.remove(&format!("{VISION_HEAD}.bias"));
    }
}

/// Sorted distinct normalized answers of the open-ended records.
pub fn class_labels(records: &[VqaRecord]) -> Vec<String> {
    let mut set: Vec<String> = records
        .iter()
        .filter(|r| r.question_type() == QuestionType::Open)
        .map(|r| normalize_default(&r.gt_answer))
        .collect();
    set.sort();
    set.dedup();
    set
}

/// One training example of any objective.
#[derive(Debug, Clone)]
enum Example {
    Class {
        image_path: String,
        label: usize,
    },
    Qa {
        image_path: Option<String>,
        question: Vec<usize>,
        answer: Vec<usize>,
    },
}

fn examples(records: &[VqaRecord], objective: Objective, classes: &[String]) -> Vec<Example> {
    match objective {
        Objective::ImageClassification => {
            let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
            records
                .iter()
                .filter(|r| r.question_type() == QuestionType::Open)
                .filter_map(|r| {
                    index
                        .get(normalize_default(&r.gt_answer).as_str())
                        .map(|&label| Example::Class {
                            image_path: r.image_path.clone(),
                            label,
                        })
                })
                .collect()
        }
        Objective::TextQa | Objective::FusedVqa => records
            .iter()
            .map(|r| Example::Qa {
                image_path: (objective == Objective::FusedVqa).then(|| r.image_path.clone()),
                question: tokenize(&r.question),
                answer: answer_ids(&r.gt_answer),
            })
            .collect(),
    }
}

/// Loss for one example on a fresh tape. Returns `(tape, loss, supervised tokens)`.
fn example_loss(model: &VlmModel, images: &ImageBank, ex: &Example) -> Result<(Tape, crate::Var, usize)> {
    let mut tape = Tape::new();
    match ex {
        Example::Class { image_path, label } => {
            let pooled = model.pooled_image_features(&mut tape, images.get(image_path)?)?;
            let w = tape.param(&model.params, &format!("{VISION_HEAD}.weight"))?;
            let b = tape.param(&model.params, &format!("{VISION_HEAD}.bias"))?;
            let logits = tape.linear(pooled, w, Some(b))?;
            let loss = tape.cross_entropy(logits, &[*label], &[true])?;
            Ok((tape, loss, 1))
        }
        Example::Qa {
            image_path,
            question,
            answer,
        } => {
            let image = image_path.as_deref().map(|p| images.get(p)).transpose()?;
            let sample = VqaSample {
                image,
                question_ids: question,
                answer_ids: answer,
            };
            let (loss, n) = model.sample_loss(&mut tape, &sample)?;
            Ok((tape, loss, n))
        }
    }
}

/// Accumulates `scale / len` times each example's gradient; returns the mean loss.
fn batch_grad(model: &mut VlmModel, images: &ImageBank, batch: &[&Example], scale: f64) -> Result<f64> {
    let mut total = 0.0;
    let per = scale / batch.len() as f64;
    for ex in batch {
        let (tape, loss, _) = example_loss(model, images, ex)?;
        total += tape.item(loss);
        tape.backward_into(loss, &mut model.params, per)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean per-token loss over `exs` (per-example for classification).
fn held_out_loss(model: &VlmModel, images: &ImageBank, exs: &[Example]) -> Result<Option<f64>> {
    if exs.is_empty() {
        return Ok(None);
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for ex in exs {
        let (tape, loss, n) = example_loss(model, images, ex)?;
        sum += tape.item(loss) * n as f64;
        count += n;
    }
    Ok(Some(sum / count as f64))
}

/// Runs (or continues) one stage. Returns the progress reached, which is
/// finished unless `opts.stop_after` interrupted it.
pub fn run_stage(
    model: &mut VlmModel,
    mut progress: StageProgress,
    data: &StageData<'_>,
    hyper: &TrainHyperparams,
    opts: &RunOptions,
) -> Result<StageProgress> {
    hyper.validate()?;
    if let Some(r) = data.train.iter().chain(data.test).find(|r| r.options.is_some()) {
        return Err(Error::Contract(format!(
            "record `{}` still has options; reformulate first",
            r.question_id
        )));
    }
    let plan = progress.plan.clone();
    plan.schedule.validate()?;
    prepare_model(model, &plan, data, opts)?;
    plan.apply_selectors(&mut model.params)?;
    if plan.steps == 0 {
        finish_model(model, &plan);
        return Ok(progress);
    }

    let classes = class_labels(data.train);
    let train = examples(data.train, plan.objective, &classes);
    let test = examples(data.test, plan.objective, &classes);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "stage {}: no training examples",
            plan.stage.as_str()
        )));
    }
    let n_batches = train.len().div_ceil(hyper.batch_size) as u64;
    let accum = hyper.grad_accum_steps as u64;
    let steps_per_epoch = n_batches.div_ceil(accum);
    let started = progress.step;

    while progress.step < plan.steps {
        if opts.stop_after.is_some_and(|k| progress.step - started >= k) {
            return Ok(progress);
        }
        let s = progress.step;
        let epoch = s / steps_per_epoch;
        let within = s % steps_per_epoch;
        let order = batch_order(train.len(), hyper.batch_size, hyper.seed, epoch);
        let lo = (within * accum) as usize;
        let hi = ((within + 1) * accum).min(n_batches) as usize;
        let groups: Vec<Vec<&Example>> = order[lo..hi]
            .iter()
            .map(|b| b.iter().map(|&i| &train[i]).collect())
            .collect();

        let lr = lr_at_step(&plan.schedule, s)?;
        let mut store = std::mem::take(&mut model.params);
        let result = accumulate_and_step(
            &mut store,
            &mut progress.optimizer,
            groups,
            hyper.grad_accum_steps,
            |_| Ok(lr),
            |store, batch, scale| {
                std::mem::swap(&mut model.params, store);
                let r = batch_grad(model, data.images, batch, scale);
                std::mem::swap(&mut model.params, store);
                r
            },
        );
        model.params = store;
        let loss = result?[0];
        if !loss.is_finite() {
            return Err(Error::NumericDomain("training loss is not finite"));
        }
        progress.log.steps.push(StepRow { step: s, lr, loss });
        progress.step += 1;

        let epoch_done = progress.step.is_multiple_of(steps_per_epoch) || progress.step == plan.steps;
        if epoch_done {
            let rows: Vec<f64> = progress
                .log
                .steps
                .iter()
                .filter(|r| r.step / steps_per_epoch == epoch)
                .map(|r| r.loss)
                .collect();
            let train_loss = rows.iter().sum::<f64>() / rows.len() as f64;
            let test_loss = held_out_loss(model, data.images, &test)?;
            progress.log.epochs.push(EpochRow {
                epoch,
                train_loss,
                test_loss,
            });
        }

        if let Some(root) = &opts.checkpoint_root {
            let periodic = opts
                .checkpoint_every
                .is_some_and(|k| k > 0 && progress.step.is_multiple_of(k));
            if periodic || progress.step == plan.steps {
                if progress.step == plan.steps {
                    finish_model(model, &plan);
                }
                model.params.round_to_f32();
                save_checkpoint(
                    &root.join(checkpoint_dir_name(plan.stage, progress.step)),
                    model,
                    &progress,
                    hyper.seed,
                )?;
            }
        }
    }
    finish_model(model, &plan);
    Ok(progress)
}

/// Runs `stages` in order, resuming the first from `resume` when given.
pub fn run_stages(
    model: &mut VlmModel,
    stages: &[StagePlan],
    resume: Option<StageProgress>,
    data: &StageData<'_>,
    hyper: &TrainHyperparams,
    opts: &RunOptions,
) -> Result<Vec<TrainLog>> {
    let mut logs = Vec::new();
    let mut resume = resume;
    for plan in stages {
        let progress = match resume.take() {
            Some(p) if p.plan.stage == plan.stage => p,
            Some(p) => {
                return Err(Error::Config(format!(
                    "resume checkpoint is for stage {}, expected {}",
                    p.plan.stage.as_str(),
                    plan.stage.as_str()
                )))
            }
            None => StageProgress::start(plan.clone(), opts.adamw.clone()),
        };
        let done = run_stage(model, progress, data, hyper, opts)?;
        let finished = done.finished();
        logs.push(done.log);
        if !finished {
            break;
        }
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn store(names: &[&str]) -> ParamStore {
        let mut s = ParamStore::new();
        for n in names {
            s.insert(*n, Tensor::zeros(&[1])).unwrap();
        }
        s
    }

    #[test]
    fn joint_selectors_partition() {
        let plan = StagePlan::standard(StageId::JointFinetune, 10, &ScheduleConfig::default());
        let mut s = store(&[
            "vision.pos_embed",
            "projector.weight",
            "lm.tok_embed",
            "lm.pos_embed",
            "lm.blocks.0.attn.q.weight",
            "lm.blocks.0.attn.q.lora_a",
            "lm.blocks.0.attn.q.lora_b",
            "lm.final_norm.gain",
        ]);
        plan.apply_selectors(&mut s).unwrap();
        let trainable: Vec<&str> = s.iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n).collect();
        assert_eq!(
            trainable,
            [
                "lm.blocks.0.attn.q.lora_a",
                "lm.blocks.0.attn.q.lora_b",
                "projector.weight",
                "vision.pos_embed"
            ]
        );
        assert_eq!(plan.schedule.warmup_steps, 10);
    }

    #[test]
    fn uncovered_parameter_rejected() {
        let plan = StagePlan::standard(StageId::TextLora, 10, &ScheduleConfig::default());
        let mut s = store(&["lm.blocks.0.attn.q.lora_a", "lm.blocks.0.attn.q.lora_b", "extra.thing"]);
        assert!(matches!(plan.apply_selectors(&mut s), Err(Error::Config(_))));
    }

    #[test]
    fn unresolved_trainable_selector_rejected() {
        let plan = StagePlan::standard(StageId::TextLora, 10, &ScheduleConfig::default());
        let mut s = store(&["lm.tok_embed"]);
        assert!(plan.apply_selectors(&mut s).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let mut log = TrainLog::new(StageId::JointFinetune);
        log.epochs.push(EpochRow {
            epoch: 0,
            train_loss: 1.5,
            test_loss: None,
        });
        assert_eq!(loss_csv(&log), "epoch,train_loss,test_loss\n0,1.5,\n");
    }
}
