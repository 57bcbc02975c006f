//! Training, evaluation, ablations, the M sweep, embedding export and the
//! gradient-check suite.

mod check;
mod evaluate;
mod experiments;
mod model;
mod optim;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{
    check_disjoint, generate_synthetic, load_descriptions_json, load_fewrel_json, DatasetSplit, Descriptions, SplitRole,
    SyntheticSpec,
};
use crate::encoder::{EncoderConfig, EncoderParams, ParamFile};
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::multirep::RepSelector;
use crate::objectives::{LossBreakdown, LossConfig};
use crate::textproc::{build_vocab, Vocab};

pub use check::{run_gradcheck_suite, total_loss_gradcheck, GradcheckSummary};
pub use evaluate::{evaluate, untrained_accuracy, EpisodeResult};
pub use experiments::{
    ablate, export_embeddings, sweep_m, write_ablation_csv, write_sweep_csv, AblationArm, AblationRow, SweepRow,
    SweepSummary,
};
pub use model::{episode_forward, EpisodeOutput, ModelSpec};
pub use optim::{Adam, AdamConfig};
pub use train::{train, train_seed, train_seed_with, LossRecord, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything a run depends on. Unset fields take desk-scale defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// `vocab_size` is filled in from the data.
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub representations: RepSelector,
    pub train_episode: EpisodeSpec,
    pub eval_episode: EpisodeSpec,
    pub optimizer: AdamConfig,
    pub iterations: usize,
    /// Episodes whose losses are summed into one optimizer step.
    pub batch_episodes: usize,
    pub eval_episodes: usize,
    /// Validate every this many steps and keep the best parameters
    /// (0 = keep the final parameters). Needs a validation split.
    pub val_every: usize,
    pub val_episodes: usize,
    pub log_every: usize,
    pub seeds: Vec<u64>,
    pub max_len: usize,
    pub min_freq: usize,
    pub precision: Precision,
    /// Used when no data files are given.
    pub synthetic: SyntheticSpec,
    pub synthetic_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            encoder: EncoderConfig::default(),
            loss: LossConfig::default(),
            representations: RepSelector::full(),
            train_episode: EpisodeSpec::new(5, 1),
            eval_episode: EpisodeSpec::new(5, 1),
            optimizer: AdamConfig::default(),
            iterations: 2000,
            batch_episodes: 2,
            eval_episodes: 1000,
            val_every: 0,
            val_episodes: 200,
            log_every: 10,
            seeds: vec![1],
            max_len: 96,
            min_freq: 1,
            precision: Precision::F32,
            synthetic: SyntheticSpec {
                train_relations: 7,
                ..SyntheticSpec::default()
            },
            synthetic_seed: 0,
        }
    }
}

impl RunConfig {
    /// Schedule for a large pretrained-size encoder: small learning rate, long run.
    pub fn full_schedule() -> Self {
        RunConfig {
            optimizer: AdamConfig {
                lr: 2e-5,
                ..AdamConfig::default()
            },
            iterations: 30_000,
            batch_episodes: 4,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train_episode.validate()?;
        self.eval_episode.validate()?;
        self.optimizer.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_episodes == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("batch and eval episode counts must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(0.0..1.0).contains(&self.representations.description_dropout) {
            return Err(Error::Config("description dropout outside [0, 1)".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    /// Descriptions on or off for losses, scoring and episodes together.
    pub fn set_descriptions(&mut self, on: bool) {
        if on {
            self.loss.use_descriptions = true;
        } else {
            self.loss = self.loss.clone().without_descriptions();
        }
        self.train_episode.with_descriptions = self.loss.use_descriptions;
        self.eval_episode.with_descriptions = self.loss.use_descriptions;
    }

    pub fn model(&self) -> ModelSpec {
        ModelSpec {
            loss: self.loss.clone(),
            representations: self.representations.clone(),
        }
    }

    fn with_descriptions_synced(&self) -> Self {
        let mut c = self.clone();
        let on = c.loss.use_descriptions;
        c.set_descriptions(on);
        c
    }
}

/// Where the splits come from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
}

/// Loaded splits with their shared vocabulary.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: DatasetSplit,
    pub val: Option<DatasetSplit>,
    pub eval: Option<DatasetSplit>,
    pub descriptions: Descriptions,
    pub vocab: Vocab,
}

impl Data {
    /// Synthetic corpus per `config`: its train split for training and its
    /// held-out split for evaluation.
    pub fn synthetic(config: &RunConfig) -> Result<Self> {
        let c = generate_synthetic(&config.synthetic, config.synthetic_seed)?;
        Self::assemble(c.train, None, Some(c.eval), c.descriptions, config.min_freq)
    }

    pub fn load(paths: &DataPaths, config: &RunConfig) -> Result<Self> {
        let Some(train_path) = &paths.train else {
            return Self::synthetic(config);
        };
        let train = load_fewrel_json(train_path, SplitRole::Train)?;
        let val = paths.val.as_ref().map(|p| load_fewrel_json(p, SplitRole::Validation)).transpose()?;
        let eval = paths.eval.as_ref().map(|p| load_fewrel_json(p, SplitRole::Test)).transpose()?;
        let descriptions = match &paths.descriptions {
            Some(p) => load_descriptions_json(p)?,
            None => Descriptions::new(),
        };
        Self::assemble(train, val, eval, descriptions, config.min_freq)
    }

    /// The vocabulary covers the tokens of every split and description, so
    /// held-out entity names keep distinct (untrained) embeddings instead of
    /// collapsing to `[UNK]`.
    pub fn assemble(
        train: DatasetSplit,
        val: Option<DatasetSplit>,
        eval: Option<DatasetSplit>,
        descriptions: Descriptions,
        min_freq: usize,
    ) -> Result<Self> {
        let mut splits = vec![&train];
        splits.extend(val.as_ref());
        splits.extend(eval.as_ref());
        check_disjoint(&splits)?;
        let vocab = build_vocab(&splits, &descriptions, min_freq)?;
        Ok(Data {
            train,
            val,
            eval,
            descriptions,
            vocab,
        })
    }

    pub fn eval_split(&self) -> Result<&DatasetSplit> {
        self.eval
            .as_ref()
            .or(self.val.as_ref())
            .ok_or_else(|| Error::Config("no evaluation split available".into()))
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model: parameters plus everything needed to encode inputs and
/// score episodes the same way as in training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub step: usize,
    pub max_len: usize,
    pub vocab: Vec<String>,
    pub representations: RepSelector,
    pub loss: LossConfig,
    pub encoder: ParamFile,
}

impl Checkpoint {
    pub fn new<T: crate::autodiff::Real>(
        params: &EncoderParams<T>,
        vocab: &Vocab,
        config: &RunConfig,
        seed: u64,
        step: usize,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            seed,
            step,
            max_len: config.max_len,
            vocab: vocab.tokens().to_vec(),
            representations: config.representations.clone(),
            loss: config.loss.clone(),
            encoder: ParamFile::from_params(params),
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_tokens(self.vocab.clone())
    }

    pub fn model(&self) -> ModelSpec {
        ModelSpec {
            loss: self.loss.clone(),
            representations: self.representations.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAccuracy {
    pub seed: u64,
    pub accuracy: f64,
}

/// Accuracy over seeds plus the training-loss history.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub per_seed: Vec<SeedAccuracy>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub history: Vec<LossRecord>,
}

impl Metrics {
    pub fn from_seeds(spec: &EpisodeSpec, episodes: usize, per_seed: Vec<SeedAccuracy>) -> Self {
        let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        Metrics {
            n_way: spec.n,
            k_shot: spec.k,
            episodes,
            per_seed,
            accuracy_mean: mean,
            accuracy_std: std,
            history: Vec::new(),
        }
    }

    /// Table cell label such as `5-1`.
    pub fn cell(&self) -> String {
        format!("{}-{}", self.n_way, self.k_shot)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Mean and population standard deviation; `(0, 0)` for no values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn breakdown_text(b: &LossBreakdown) -> String {
    format!("l_ce={} l_rcl={} l_rdcl={} total={}", b.l_ce, b.l_rcl, b.l_rdcl, b.total)
}

// Purposes mixed into seeds so each random consumer gets its own stream.
pub(crate) const KEY_INIT: u64 = 1;
pub(crate) const KEY_TRAIN_EPISODES: u64 = 2;
pub(crate) const KEY_DROPOUT: u64 = 3;
pub(crate) const KEY_EVAL_EPISODES: u64 = 4;
pub(crate) const KEY_VAL_EPISODES: u64 = 5;

pub(crate) fn derived(seed: u64, key: u64) -> u64 {
    crate::autodiff::mix(&[seed, key])
}
