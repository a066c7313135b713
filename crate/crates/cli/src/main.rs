use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adc_core::nn::checkpoint::Checkpoint;
use adc_core::nn::gradcheck::GradCheckConfig;
use adc_core::synth::{self, SynthConfig};
use adc_core::text::{self, surface, Dataset, LoadOptions, Split};
use adc_core::trainer::{self, Models, Progress, RewardMetric, TrainConfig, TrainOutputs};
use adc_core::{gradcheck_suite, AdcError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const CHECKPOINT_FILE: &str = "checkpoint.adc";
const REWARD_LOG_FILE: &str = "rewards.csv";

#[derive(Parser)]
#[command(name = "adc", version, about = "Actor dual-critic image captioning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset in JSON Lines format.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    hidden_size: Option<usize>,
    #[arg(long)]
    reward_metric: Option<RewardMetric>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProbeSource {
    Gt,
    Gen,
    Cross,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the actor and both critics and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
    },
    /// Run ADC training; --out is a directory for checkpoint and reward log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Stop after this many completed epochs (the run can be resumed).
        #[arg(long)]
        stop_after_epochs: Option<usize>,
    },
    /// Print greedy captions as `id<TAB>caption`.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "all_test", required_unless_present = "all_test")]
        id: Option<String>,
        #[arg(long)]
        all_test: bool,
    },
    /// Score greedy captions of a split; JSON on stdout.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruction versus feature vector for one example, as CSV.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        id: String,
        #[arg(long, value_enum)]
        source: ProbeSource,
    },
}

fn require<'a>(flag: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    flag.as_deref()
        .ok_or_else(|| AdcError::Validation(format!("--{name} is required")))
}

fn train_config(common: &Common, flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(e) = flags.epochs {
        cfg.total_epochs = e;
    }
    if let Some(e) = flags.episodes_per_epoch {
        cfg.episodes_per_epoch = e;
    }
    if let Some(h) = flags.hidden_size {
        cfg.hidden_size = h;
    }
    if let Some(m) = flags.reward_metric {
        cfg.reward_metric = m;
    }
    if let Some(lr) = flags.lr {
        cfg.adam.lr = lr;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(common: &Common, cfg: &TrainConfig) -> Result<Dataset> {
    let path = require(&common.data, "data")?;
    let opts = LoadOptions {
        min_count: cfg.min_count,
        t_max: cfg.t_max,
        ..Default::default()
    };
    let dataset = text::load_dataset(path, &opts)?;
    info!(
        "{} examples, vocabulary {}, feature dim {}",
        dataset.examples.len(),
        dataset.vocabulary.len(),
        dataset.feature_dim
    );
    Ok(dataset)
}

fn load_models(common: &Common, dataset: &Dataset) -> Result<(Models, Progress)> {
    let path = require(&common.checkpoint, "checkpoint")?;
    let (models, progress) = Models::from_checkpoint(&Checkpoint::load(path)?)?;
    models.check_dataset(dataset)?;
    Ok((models, progress))
}

fn example<'a>(dataset: &'a Dataset, id: &str) -> Result<&'a text::CaptionedExample> {
    dataset
        .get(id)
        .ok_or_else(|| AdcError::Validation(format!("no example with id '{id}'")))
}

fn run(command: Command) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let write_err = |e: std::io::Error| AdcError::io("<stdout>", e);
    match command {
        Command::Synth { common } => {
            let mut cfg = match &common.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| AdcError::io(p, e))?;
                    serde_json::from_str::<SynthConfig>(&text)
                        .map_err(|e| AdcError::Validation(format!("synth config: {e}")))?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let path = require(&common.out, "out")?;
            let examples = synth::generate(&cfg)?;
            let file = File::create(path).map_err(|e| AdcError::io(path, e))?;
            let mut w = BufWriter::new(file);
            text::write_jsonl(&mut w, &examples).map_err(|e| AdcError::io(path, e))?;
            w.flush().map_err(|e| AdcError::io(path, e))?;
            info!("wrote {} examples to {}", examples.len(), path.display());
        }
        Command::Pretrain { common, flags } => {
            let cfg = train_config(&common, &flags)?;
            let dataset = load_data(&common, &cfg)?;
            let path = require(&common.out, "out")?;
            let mut models = Models::for_dataset(&dataset, &cfg)?;
            let log = trainer::pretrain(&mut models, &dataset, &cfg)?;
            if let Some(last) = log.actor_nll.last() {
                info!("final actor NLL {last:.4}");
            }
            let progress = Progress { pretrained: true, ..Default::default() };
            models.to_checkpoint(progress).save(path)?;
        }
        Command::Train { common, flags, stop_after_epochs } => {
            let cfg = train_config(&common, &flags)?;
            let dataset = load_data(&common, &cfg)?;
            let dir = require(&common.out, "out")?;
            std::fs::create_dir_all(dir).map_err(|e| AdcError::io(dir, e))?;
            let start = match &common.checkpoint {
                Some(_) => Some(load_models(&common, &dataset)?),
                None => None,
            };
            let outputs = TrainOutputs {
                checkpoint: Some(dir.join(CHECKPOINT_FILE)),
                reward_log: Some(dir.join(REWARD_LOG_FILE)),
                stop_after_epochs,
            };
            let outcome = trainer::run_training(&dataset, &cfg, start, &outputs)?;
            info!(
                "{} epochs, {} episodes complete",
                outcome.progress.epochs_completed, outcome.progress.episodes_completed
            );
        }
        Command::Caption { common, id, all_test } => {
            let cfg = train_config(&common, &TrainFlags::default())?;
            let dataset = load_data(&common, &cfg)?;
            let (models, _) = load_models(&common, &dataset)?;
            let targets: Vec<&text::CaptionedExample> = match id {
                Some(id) => vec![example(&dataset, &id)?],
                None if all_test => dataset.split(Split::Test).collect(),
                None => unreachable!("clap requires --id or --all-test"),
            };
            for e in targets {
                let tokens = models.actor.greedy_decode(&e.features, cfg.t_max)?;
                writeln!(out, "{}\t{}", e.id, dataset.vocabulary.sentence(&surface(&tokens))).map_err(write_err)?;
            }
        }
        Command::Evaluate { common, split } => {
            let cfg = train_config(&common, &TrainFlags::default())?;
            let dataset = load_data(&common, &cfg)?;
            let (models, _) = load_models(&common, &dataset)?;
            let report = trainer::evaluate(&models.actor, &dataset, split, cfg.t_max)?;
            eprintln!("{}", report.table());
            let json = serde_json::to_string(&report).map_err(|e| AdcError::Validation(e.to_string()))?;
            writeln!(out, "{json}").map_err(write_err)?;
        }
        Command::Gradcheck { common } => {
            let cfg = GradCheckConfig { seed: common.seed.unwrap_or(0), ..Default::default() };
            let mut failed = Vec::new();
            writeln!(out, "component,max_rel_error,coords_checked,kinks_skipped,status").map_err(write_err)?;
            for (name, report) in gradcheck_suite::run_all(cfg)? {
                let pass = report.max_rel_error < GRADCHECK_TOLERANCE;
                if !pass {
                    failed.push(format!("{name} ({})", report.worst_param));
                }
                writeln!(
                    out,
                    "{name},{:e},{},{},{}",
                    report.max_rel_error,
                    report.coords_checked,
                    report.kinks_skipped,
                    if pass { "PASS" } else { "FAIL" }
                )
                .map_err(write_err)?;
            }
            if !failed.is_empty() {
                return Err(AdcError::Validation(format!(
                    "gradient check above {GRADCHECK_TOLERANCE:e}: {}",
                    failed.join(", ")
                )));
            }
        }
        Command::Probe { common, id, source } => {
            let cfg = train_config(&common, &TrainFlags::default())?;
            let dataset = load_data(&common, &cfg)?;
            let (models, _) = load_models(&common, &dataset)?;
            let e = example(&dataset, &id)?;
            let sentence = match source {
                ProbeSource::Gt => e.captions[0].clone(),
                ProbeSource::Gen => models.actor.greedy_tokens(&e.features, cfg.t_max)?,
                ProbeSource::Cross => dataset
                    .examples
                    .iter()
                    .find(|o| o.class_label != e.class_label)
                    .ok_or_else(|| AdcError::Validation("no example from another class".into()))?
                    .captions[0]
                    .clone(),
            };
            let record = models.encdec.probe(&e.features, &sentence)?;
            write!(out, "{}", record.to_csv()).map_err(write_err)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
