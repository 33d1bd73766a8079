mod config;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use medvqa_core::data::{
    detokenize, generate_synthetic, load_dataset, reformulate_all, save_dataset, split, tokenize, GrayImage, ImageBank,
    SyntheticSpec, DEFAULT_TRAIN_RATIO,
};
use medvqa_core::eval::{emit_report, evaluate, CountsFile, EvalReport, ReportFormat};
use medvqa_core::gradsuite::{gradient_suite, TOLERANCE};
use medvqa_core::model::{GenerationParams, VlmModel};
use medvqa_core::train::{
    checkpoint_dir_name, emit_loss_csv, load_checkpoint, run_stages, steps_csv, RunOptions, StageData, StageId,
};

use config::RunConfig;

/// A user-facing validation failure (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser)]
#[command(
    name = "medvqa",
    version,
    about = "Train and evaluate a desk-scale medical VQA model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Vision,
    Text,
    Joint,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape dataset.
    Synth {
        /// JSON synthetic spec; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn multiple-choice records into open-ended ones.
    Reformulate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Image-disjoint, modality-stratified train/test split.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TRAIN_RATIO)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run training stages.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = StageArg::All)]
        stage: StageArg,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset, or score precomputed counts.
    Eval {
        #[arg(long, requires = "data", conflicts_with = "counts")]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tallies or verdicts to score without a model.
        #[arg(long, required_unless_present = "ckpt")]
        counts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying normalization and generation settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory image paths are relative to; defaults to the data file's directory.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Answer one question about one image.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long, default_value_t = GenerationParams::default().max_new_tokens)]
        max_new_tokens: usize,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds to run, starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<medvqa_core::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { spec, out } => synth(spec.as_deref(), &out),
        Command::Reformulate { input, out } => {
            let records = read_records(&input)?;
            let (records, stats) = reformulate_all(&records)?;
            save_dataset(&out, &records)?;
            println!("converted {}, passed through {}", stats.converted, stats.passed_through);
            Ok(())
        }
        Command::Split {
            input,
            ratio,
            seed,
            out,
        } => {
            let records = read_records(&input)?;
            let s = split(&records, ratio, seed)?;
            create_dir(&out)?;
            save_dataset(&out.join("train.json"), &s.train)?;
            save_dataset(&out.join("test.json"), &s.test)?;
            println!("train {} records, test {} records", s.train.len(), s.test.len());
            Ok(())
        }
        Command::Train { config, stage, resume } => train(&config, stage, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            counts,
            out,
            config,
            images,
            format,
        } => {
            let cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            let format = match format {
                Some(FormatArg::Json) => ReportFormat::Json,
                Some(FormatArg::Csv) => ReportFormat::Csv,
                None => cfg.eval.format,
            };
            let report = match (ckpt, counts) {
                (_, Some(counts)) => {
                    let text =
                        std::fs::read_to_string(&counts).with_context(|| format!("reading {}", counts.display()))?;
                    let file: CountsFile =
                        serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", counts.display())))?;
                    file.into_report()?
                }
                (Some(ckpt), None) => {
                    let data = data.expect("clap requires --data with --ckpt");
                    let model = open_checkpoint(&ckpt)?.model;
                    let records = read_records(&data)?;
                    let root = images.unwrap_or_else(|| parent_dir(&data));
                    let bank = ImageBank::load_for(&records, &root)?;
                    evaluate(&model, &records, &bank, &cfg.eval.normalization, &cfg.eval.generation)?
                }
                (None, None) => bail!(Invalid("either --ckpt or --counts is required".into())),
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let written = emit_report(&report, &out, format)?;
            print_report(&report);
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Generate {
            ckpt,
            image,
            question,
            max_new_tokens,
        } => {
            let model = open_checkpoint(&ckpt)?.model;
            let img = GrayImage::load(&image)?;
            let ids = model.generate(Some(&img), &tokenize(&question), &GenerationParams { max_new_tokens })?;
            println!("{}", detokenize(&ids));
            Ok(())
        }
        Command::Gradcheck { seed, seeds } => gradcheck(seed, seeds),
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn open_checkpoint(dir: &Path) -> Result<medvqa_core::train::Checkpoint> {
    load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn read_records(path: &Path) -> Result<Vec<medvqa_core::data::VqaRecord>> {
    load_dataset(path).with_context(|| format!("reading {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let corpus = generate_synthetic(&spec)?;
    create_dir(out)?;
    corpus.write(out)?;
    println!(
        "wrote {} records over {} images to {}",
        corpus.records.len(),
        corpus.images.len(),
        out.join("dataset.json").display()
    );
    Ok(())
}

fn stage_index(s: StageId) -> usize {
    StageId::ALL.iter().position(|&x| x == s).expect("listed")
}

fn train(config: &Path, stage: StageArg, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let requested: Vec<StageId> = match stage {
        StageArg::Vision => vec![StageId::VisionPretrain],
        StageArg::Text => vec![StageId::TextLora],
        StageArg::Joint => vec![StageId::JointFinetune],
        StageArg::All => StageId::ALL.to_vec(),
    };

    let (mut model, progress, stages) = match resume {
        None => (
            VlmModel::new(cfg.model.vision.clone(), cfg.model.lm.clone(), cfg.seed)?,
            None,
            requested,
        ),
        Some(dir) => {
            let ck = open_checkpoint(dir)?;
            if ck.model.vision_cfg != cfg.model.vision || ck.model.lm_cfg != cfg.model.lm {
                bail!(Invalid(format!(
                    "{}: model dimensions differ from the config",
                    dir.display()
                )));
            }
            let at = stage_index(ck.progress.plan.stage);
            if ck.progress.finished() {
                let rest: Vec<StageId> = requested.into_iter().filter(|&s| stage_index(s) > at).collect();
                if rest.is_empty() {
                    bail!(Invalid(format!(
                        "{} already completes stage {}",
                        dir.display(),
                        ck.progress.plan.stage.as_str()
                    )));
                }
                (ck.model, None, rest)
            } else {
                if !requested.contains(&ck.progress.plan.stage) {
                    bail!(Invalid(format!(
                        "{} is partway through stage {}",
                        dir.display(),
                        ck.progress.plan.stage.as_str()
                    )));
                }
                let rest = requested.into_iter().filter(|&s| stage_index(s) >= at).collect();
                (ck.model, Some(ck.progress), rest)
            }
        }
    };

    create_dir(&cfg.out)?;
    cfg.write_resolved(&cfg.out)?;
    let train = read_records(&cfg.data.train)?;
    let test = match &cfg.data.test {
        Some(p) => read_records(p)?,
        None => Vec::new(),
    };
    let root = cfg.data.image_root();
    let mut all = train.clone();
    all.extend(test.iter().cloned());
    let bank = ImageBank::load_for(&all, &root)?;

    let mut plans: Vec<_> = stages.iter().map(|&s| cfg.plan(s)).collect();
    if let Some(p) = &progress {
        plans[0] = p.plan.clone();
    }
    let opts = RunOptions {
        lora: cfg.lora.clone(),
        adamw: cfg.optim.adamw(),
        checkpoint_root: Some(cfg.out.clone()),
        checkpoint_every: cfg.train.checkpoint_every,
        stop_after: None,
    };
    let data = StageData {
        train: &train,
        test: &test,
        images: &bank,
    };
    let logs = run_stages(&mut model, &plans, progress, &data, &cfg.hyperparams(), &opts)?;

    for (log, plan) in logs.iter().zip(&plans) {
        let name = log.stage.as_str();
        emit_loss_csv(log, &cfg.out.join(format!("loss-{name}.csv")))?;
        std::fs::write(cfg.out.join(format!("steps-{name}.csv")), steps_csv(log))?;
        match (log.steps.first(), log.steps.last()) {
            (Some(a), Some(b)) => println!(
                "{name}: {} steps, loss {:.4} -> {:.4}, checkpoint {}",
                log.steps.len(),
                a.loss,
                b.loss,
                cfg.out.join(checkpoint_dir_name(log.stage, plan.steps)).display()
            ),
            _ => println!("{name}: no steps"),
        }
    }
    if let Some(last) = logs.last() {
        emit_loss_csv(last, &cfg.out.join("loss.csv"))?;
    }
    Ok(())
}

fn print_report(report: &EvalReport) {
    print!("{}", report.summary_table());
    if !report.by_modality.is_empty() {
        println!("{:<14} {:>9} {:>9} {:>7}", "modality", "correct", "total", "acc%");
        for (m, t) in &report.by_modality {
            let pct = t.accuracy_pct.map_or_else(|| "-".to_string(), |p| format!("{p:.1}"));
            println!("{m:<14} {:>9} {:>9} {pct:>7}", t.correct, t.total);
        }
    }
    for note in report.consistency_notes() {
        println!("note: {note}");
    }
}

fn gradcheck(seed: u64, seeds: u64) -> Result<()> {
    let mut worst: Vec<(&'static str, f64, usize)> = Vec::new();
    for s in seed..seed + seeds.max(1) {
        for c in gradient_suite(s)? {
            match worst.iter_mut().find(|w| w.0 == c.component) {
                Some(w) => {
                    w.1 = w.1.max(c.report.max_rel_error);
                    w.2 += c.report.coordinates;
                }
                None => worst.push((c.component, c.report.max_rel_error, c.report.coordinates)),
            }
        }
    }
    println!("{:<16} {:>8} {:>12}  status", "component", "coords", "max_rel_err");
    let mut failed = 0;
    for (name, err, coords) in &worst {
        let ok = *err < TOLERANCE;
        failed += usize::from(!ok);
        println!(
            "{name:<16} {coords:>8} {err:>12.3e}  {}",
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        bail!(Invalid(format!("{failed} component(s) at or above {TOLERANCE:e}")));
    }
    println!("all {} components below {TOLERANCE:e}", worst.len());
    Ok(())
}
