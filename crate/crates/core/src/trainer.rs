//! Pretraining, the episodic dual-critic training loop, checkpointing and
//! evaluation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{Actor, ModelDims, DEFAULT_DROPOUT, DEFAULT_HIDDEN};
use crate::encdec_critic::{advantage_ed, DeltaSchedule, EncDecCritic};
use crate::error::{AdcError, Result};
use crate::metrics::{bleu_n, rouge_l, MetricReport, ROUGE_BETA};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::optim::AdamConfig;
use crate::nn::rng::RngState;
use crate::text::{surface, CaptionedExample, Dataset, Split, TokenId, DEFAULT_T_MAX};
use crate::value_critic::ValueCritic;

const STREAM_INIT: u64 = 0;
const STREAM_PRETRAIN_ACTOR: u64 = 1;
const STREAM_PRETRAIN_CRITICS: u64 = 2;
const STREAM_EPOCH_BASE: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    #[default]
    RougeL,
    Bleu1,
    Bleu2,
    Bleu3,
    Bleu4,
}

impl std::str::FromStr for RewardMetric {
    type Err = AdcError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| AdcError::Validation(format!("unknown reward metric '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub episodes_per_epoch: usize,
    pub pretrain_epochs_actor: usize,
    pub pretrain_epochs_critics: usize,
    pub reward_metric: RewardMetric,
    pub gamma: f64,
    pub t_max: usize,
    pub adam: AdamConfig,
    /// Defaults to 0.01 -> 1.0 over `total_epochs`.
    pub delta_schedule: Option<DeltaSchedule>,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub hidden_size: usize,
    pub dropout_rate: f64,
    pub min_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 100,
            episodes_per_epoch: 100,
            pretrain_epochs_actor: 20,
            pretrain_epochs_critics: 10,
            reward_metric: RewardMetric::RougeL,
            gamma: 1.0,
            t_max: DEFAULT_T_MAX,
            adam: AdamConfig::default(),
            delta_schedule: None,
            seed: 0,
            checkpoint_every: 10,
            hidden_size: DEFAULT_HIDDEN,
            dropout_rate: DEFAULT_DROPOUT,
            min_count: 1,
        }
    }
}

impl TrainConfig {
    pub fn delta(&self) -> DeltaSchedule {
        self.delta_schedule
            .unwrap_or_else(|| DeltaSchedule::new(self.total_epochs))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("total_epochs", self.total_epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("t_max", self.t_max),
            ("checkpoint_every", self.checkpoint_every),
            ("hidden_size", self.hidden_size),
            ("min_count", self.min_count),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(AdcError::Validation(format!("{name} must be at least 1")));
            }
        }
        if self.gamma != 1.0 {
            return Err(AdcError::Validation(format!(
                "gamma must be 1.0 (terminal-only rewards), got {}",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(AdcError::Validation("dropout_rate must be in [0, 1)".into()));
        }
        self.adam.validate()?;
        self.delta().validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AdcError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AdcError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Terminal reward: the configured metric, maximized over references.
pub fn compute_reward(candidate: &[TokenId], references: &[Vec<TokenId>], metric: RewardMetric) -> Result<f64> {
    match metric {
        RewardMetric::RougeL => rouge_l(candidate, references, ROUGE_BETA),
        RewardMetric::Bleu1 => bleu_n(candidate, references, 1),
        RewardMetric::Bleu2 => bleu_n(candidate, references, 2),
        RewardMetric::Bleu3 => bleu_n(candidate, references, 3),
        RewardMetric::Bleu4 => bleu_n(candidate, references, 4),
    }
}

/// `A_t = r_T - v_{t-1}` for `t = 1..=T` (gamma = 1, zero intermediate rewards).
pub fn value_advantages(reward: f64, values: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if gamma != 1.0 {
        return Err(AdcError::Validation("only gamma = 1.0 is supported".into()));
    }
    if values.is_empty() {
        return Err(AdcError::Validation("no values for a non-empty episode".into()));
    }
    Ok(values.iter().map(|v| reward - v).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardRecord {
    pub episode: usize,
    pub r_t: f64,
    pub mean_adv_pi: f64,
    pub a_ed: f64,
    pub policy_loss_pi: f64,
    pub policy_loss_ed: f64,
}

pub const REWARD_LOG_HEADER: &str = "episode,r_T,mean_adv_pi,a_ed,policy_loss_pi,policy_loss_ed";

impl RewardRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.episode, self.r_t, self.mean_adv_pi, self.a_ed, self.policy_loss_pi, self.policy_loss_ed
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let bad = || AdcError::Validation(format!("malformed reward log row '{line}'"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(RewardRecord {
            episode: f[0].parse().map_err(|_| bad())?,
            r_t: num(1)?,
            mean_adv_pi: num(2)?,
            a_ed: num(3)?,
            policy_loss_pi: num(4)?,
            policy_loss_ed: num(5)?,
        })
    }
}

pub fn reward_log_csv(records: &[RewardRecord]) -> String {
    let mut out = String::from(REWARD_LOG_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn read_reward_log(path: &Path) -> Result<Vec<RewardRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| AdcError::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(RewardRecord::parse_csv_row)
        .collect()
}

/// The policy and both critics.
#[derive(Debug, Clone)]
pub struct Models {
    pub actor: Actor,
    pub value: ValueCritic,
    pub encdec: EncDecCritic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Progress {
    pub pretrained: bool,
    pub epochs_completed: usize,
    pub episodes_completed: usize,
}

impl Models {
    pub fn new(dims: ModelDims, dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut rng = RngState::new(seed).fork(STREAM_INIT).rng();
        Ok(Models {
            actor: Actor::new(dims, dropout_rate, &mut rng)?,
            value: ValueCritic::new(dims, &mut rng)?,
            encdec: EncDecCritic::new(dims, &mut rng)?,
        })
    }

    pub fn for_dataset(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let dims = ModelDims {
            feature_dim: dataset.feature_dim,
            hidden: cfg.hidden_size,
            vocab: dataset.vocabulary.len(),
        };
        Self::new(dims, cfg.dropout_rate, cfg.seed)
    }

    pub fn to_checkpoint(&self, progress: Progress) -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push_store("actor", &self.actor.store, true);
        c.push_store("value", &self.value.store, true);
        c.push_store("encdec", &self.encdec.store, true);
        c.push_meta(
            "progress",
            vec![
                progress.pretrained as u8 as f64,
                progress.epochs_completed as f64,
                progress.episodes_completed as f64,
            ],
        );
        c.push_meta("dropout_rate", vec![self.actor.dropout_rate]);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, Progress)> {
        let dropout = c.meta("dropout_rate").and_then(|v| v.first().copied()).unwrap_or(DEFAULT_DROPOUT);
        let models = Models {
            actor: Actor::from_store(c.store("actor")?, dropout)?,
            value: ValueCritic::from_store(c.store("value")?)?,
            encdec: EncDecCritic::from_store(c.store("encdec")?)?,
        };
        let progress = match c.meta("progress") {
            Some([p, e, k]) => Progress {
                pretrained: *p != 0.0,
                epochs_completed: *e as usize,
                episodes_completed: *k as usize,
            },
            _ => Progress::default(),
        };
        Ok((models, progress))
    }

    pub fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let d = self.actor.dims;
        if d.vocab != dataset.vocabulary.len() || d.feature_dim != dataset.feature_dim {
            return Err(AdcError::shape(
                "checkpoint vs dataset",
                format!("vocab {} / features {}", d.vocab, d.feature_dim),
                format!(
                    "vocab {} / features {}",
                    dataset.vocabulary.len(),
                    dataset.feature_dim
                ),
            ));
        }
        Ok(())
    }
}

/// One episode: sample, reward, value-baseline policy step, value update,
/// dual-critic policy step, encoder-decoder update.
///
/// Returns `None` (and logs a warning) for an empty trace.
#[allow(clippy::too_many_arguments)]
pub fn train_episode_with<R, F>(
    models: &mut Models,
    example: &CaptionedExample,
    cfg: &TrainConfig,
    epoch: usize,
    episode: usize,
    rng: &mut R,
    reward_fn: F,
) -> Result<Option<RewardRecord>>
where
    R: Rng + ?Sized,
    F: Fn(&[TokenId], &[Vec<TokenId>]) -> Result<f64>,
{
    if example.captions.is_empty() {
        return Err(AdcError::Validation(format!("example '{}' has no references", example.id)));
    }
    let features = &example.features;
    let trace = models.actor.sample_caption(features, cfg.t_max, true, rng)?;
    if trace.is_empty() {
        warn!("episode {episode}: empty trace, skipped");
        return Ok(None);
    }
    let r_t = reward_fn(&surface(&trace.tokens), &example.references())?;

    let values = models.value.values(features, &trace.tokens)?;
    let adv = value_advantages(r_t, &values, cfg.gamma)?;
    let policy_loss_pi = models.actor.reinforce_update(&trace, &adv, &cfg.adam, epoch)?;
    models.value.update(features, &trace.tokens, r_t, &cfg.adam, epoch)?;

    let gt = &example.captions[rng.gen_range(0..example.captions.len())];
    let a_gen = models.encdec.cosine_accuracy(features, &trace.tokens)?;
    let a_orig = models.encdec.cosine_accuracy(features, gt)?;
    let a_ed = advantage_ed(a_gen, a_orig, &cfg.delta(), epoch);
    let policy_loss_ed = models
        .actor
        .reinforce_update(&trace, &vec![a_ed; trace.len()], &cfg.adam, epoch)?;
    models.encdec.update(features, gt, &cfg.adam, epoch)?;

    Ok(Some(RewardRecord {
        episode,
        r_t,
        mean_adv_pi: adv.iter().sum::<f64>() / adv.len() as f64,
        a_ed,
        policy_loss_pi,
        policy_loss_ed,
    }))
}

pub fn train_episode<R: Rng + ?Sized>(
    models: &mut Models,
    example: &CaptionedExample,
    cfg: &TrainConfig,
    epoch: usize,
    episode: usize,
    rng: &mut R,
) -> Result<Option<RewardRecord>> {
    let metric = cfg.reward_metric;
    train_episode_with(models, example, cfg, epoch, episode, rng, |c, r| {
        compute_reward(c, r, metric)
    })
}

/// Per-epoch mean losses of each pretraining objective.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    pub actor_nll: Vec<f64>,
    pub value_huber: Vec<f64>,
    pub encdec_mse: Vec<f64>,
}

fn caption_pairs(dataset: &Dataset) -> Vec<(usize, usize)> {
    dataset
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Train)
        .flat_map(|(i, e)| (0..e.captions.len()).map(move |c| (i, c)))
        .collect()
}

/// Teacher-forced maximum likelihood on every train caption.
pub fn pretrain_actor(actor: &mut Actor, dataset: &Dataset, cfg: &TrainConfig, log: &mut PretrainLog) -> Result<()> {
    let mut pairs = caption_pairs(dataset);
    if pairs.is_empty() {
        return Err(AdcError::Validation("train split is empty".into()));
    }
    let base = RngState::new(cfg.seed).fork(STREAM_PRETRAIN_ACTOR);
    for epoch in 0..cfg.pretrain_epochs_actor {
        let mut rng = base.fork(STREAM_PRETRAIN_ACTOR + STREAM_EPOCH_BASE * (epoch as u64 + 1)).rng();
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for &(i, c) in &pairs {
            let e = &dataset.examples[i];
            total += actor.pretrain_step(&e.features, &e.captions[c], &cfg.adam, epoch, &mut rng)?;
        }
        let mean = total / pairs.len() as f64;
        if !mean.is_finite() {
            return Err(AdcError::Numerics(format!("actor pretraining loss at epoch {epoch}")));
        }
        info!("pretrain actor epoch {epoch}: nll {mean:.5}");
        log.actor_nll.push(mean);
    }
    Ok(())
}

/// Value critic toward greedy-caption rewards; encoder-decoder critic on
/// ground-truth pairs.
pub fn pretrain_critics(models: &mut Models, dataset: &Dataset, cfg: &TrainConfig, log: &mut PretrainLog) -> Result<()> {
    let mut pairs = caption_pairs(dataset);
    if pairs.is_empty() {
        return Err(AdcError::Validation("train split is empty".into()));
    }
    let mut greedy = Vec::new();
    for (i, e) in dataset.examples.iter().enumerate() {
        if e.split != Split::Train {
            continue;
        }
        let tokens = models.actor.greedy_tokens(&e.features, cfg.t_max)?;
        let r = compute_reward(&surface(&tokens), &e.references(), cfg.reward_metric)?;
        greedy.push((i, tokens, r));
    }
    let base = RngState::new(cfg.seed).fork(STREAM_PRETRAIN_CRITICS);
    for epoch in 0..cfg.pretrain_epochs_critics {
        let mut rng = base.fork(STREAM_PRETRAIN_CRITICS + STREAM_EPOCH_BASE * (epoch as u64 + 1)).rng();
        let mut value_total = 0.0;
        greedy.shuffle(&mut rng);
        for (i, tokens, r) in &greedy {
            let e = &dataset.examples[*i];
            value_total += models.value.update(&e.features, tokens, *r, &cfg.adam, epoch)?;
        }
        pairs.shuffle(&mut rng);
        let mut mse_total = 0.0;
        for &(i, c) in &pairs {
            let e = &dataset.examples[i];
            mse_total += models.encdec.update(&e.features, &e.captions[c], &cfg.adam, epoch)?;
        }
        let (vh, mse) = (value_total / greedy.len() as f64, mse_total / pairs.len() as f64);
        info!("pretrain critics epoch {epoch}: huber {vh:.5} mse {mse:.6}");
        log.value_huber.push(vh);
        log.encdec_mse.push(mse);
    }
    Ok(())
}

pub fn pretrain(models: &mut Models, dataset: &Dataset, cfg: &TrainConfig) -> Result<PretrainLog> {
    let mut log = PretrainLog::default();
    pretrain_actor(&mut models.actor, dataset, cfg, &mut log)?;
    pretrain_critics(models, dataset, cfg, &mut log)?;
    Ok(log)
}

/// Where `run_training` writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub reward_log: Option<PathBuf>,
    /// Stop (after checkpointing) once this many epochs are complete.
    pub stop_after_epochs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub models: Models,
    pub progress: Progress,
    /// Every episode so far, including those of a resumed-from run when its
    /// log was available.
    pub rewards: Vec<RewardRecord>,
    pub pretrain_log: Option<PretrainLog>,
}

fn write_artifacts(out: &TrainOutputs, models: &Models, progress: Progress, rewards: &[RewardRecord]) -> Result<()> {
    if let Some(path) = &out.checkpoint {
        models.to_checkpoint(progress).save(path)?;
    }
    if let Some(path) = &out.reward_log {
        std::fs::write(path, reward_log_csv(rewards)).map_err(|e| AdcError::io(path, e))?;
    }
    Ok(())
}

/// Pretrains (unless the starting models already are), then runs
/// `total_epochs x episodes_per_epoch` episodes over per-epoch shuffled
/// train examples. Each epoch's randomness derives from `(seed, epoch)`, so
/// resuming from an epoch-boundary checkpoint continues exactly.
pub fn run_training(
    dataset: &Dataset,
    cfg: &TrainConfig,
    start: Option<(Models, Progress)>,
    out: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train: Vec<usize> = dataset
        .examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train.is_empty() {
        return Err(AdcError::Validation("train split is empty".into()));
    }
    let (mut models, mut progress) = match start {
        Some(s) => s,
        None => (Models::for_dataset(dataset, cfg)?, Progress::default()),
    };
    models.check_dataset(dataset)?;

    let mut rewards = Vec::new();
    if progress.episodes_completed > 0 {
        if let Some(path) = out.reward_log.as_ref().filter(|p| p.exists()) {
            rewards = read_reward_log(path)?;
            rewards.truncate(progress.episodes_completed);
        }
    }

    let mut pretrain_log = None;
    if !progress.pretrained {
        pretrain_log = Some(pretrain(&mut models, dataset, cfg)?);
        progress.pretrained = true;
    }

    let delta = cfg.delta();
    let stop = cfg
        .total_epochs
        .min(out.stop_after_epochs.unwrap_or(usize::MAX));
    while progress.epochs_completed < stop {
        let epoch = progress.epochs_completed;
        let mut rng = RngState::new(cfg.seed)
            .fork(STREAM_EPOCH_BASE * (epoch as u64 + 1))
            .rng();
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut epoch_reward = 0.0;
        let mut ran = 0usize;
        for k in 0..cfg.episodes_per_epoch {
            let example = &dataset.examples[order[k % order.len()]];
            let index = progress.episodes_completed;
            if let Some(rec) = train_episode(&mut models, example, cfg, epoch, index, &mut rng)? {
                epoch_reward += rec.r_t;
                ran += 1;
                rewards.push(rec);
            }
            progress.episodes_completed += 1;
        }
        progress.epochs_completed += 1;
        info!(
            "epoch {epoch}: delta {:.4} mean r_T {:.4}",
            delta.delta(epoch),
            epoch_reward / ran.max(1) as f64
        );
        if progress.epochs_completed % cfg.checkpoint_every == 0 || progress.epochs_completed == stop {
            write_artifacts(out, &models, progress, &rewards)?;
        }
    }
    if progress.epochs_completed == 0 || cfg.total_epochs == 0 {
        write_artifacts(out, &models, progress, &rewards)?;
    }
    Ok(TrainOutcome {
        models,
        progress,
        rewards,
        pretrain_log,
    })
}

/// Greedy captions for every example of `split`, scored against its references.
pub fn evaluate(actor: &Actor, dataset: &Dataset, split: Split, t_max: usize) -> Result<MetricReport> {
    let examples: Vec<&CaptionedExample> = dataset.split(split).collect();
    if examples.is_empty() {
        return Err(AdcError::Validation(format!("split {split:?} is empty")));
    }
    let mut candidates = Vec::with_capacity(examples.len());
    let mut references = Vec::with_capacity(examples.len());
    for e in examples {
        candidates.push(surface(&actor.greedy_decode(&e.features, t_max)?));
        references.push(e.references());
    }
    MetricReport::score(&candidates, &references)
}
