use rayon::prelude::*;

use super::model::{episode_forward, ModelSpec};
use super::{derived, Checkpoint, Data, Metrics, RunConfig, SeedAccuracy, KEY_EVAL_EPISODES, KEY_INIT};
use crate::autodiff::{Graph, Mode, Real, SeedStream};
use crate::corpus::{DatasetSplit, Descriptions};
use crate::encoder::{init_params, EncoderParams};
use crate::episodes::{episode_at, EncodedSplit, EpisodeSpec};
use crate::error::{Error, Result};
use crate::objectives::predict;
use crate::textproc::Vocab;

/// Correct and total query counts of one episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EpisodeResult {
    pub correct: usize,
    pub total: usize,
}

/// A split prepared for evaluation: the raw split (for sampling) and its
/// encoded inputs.
pub(crate) struct EvalTarget<'a> {
    split: &'a DatasetSplit,
    encoded: EncodedSplit,
}

impl<'a> EvalTarget<'a> {
    pub(crate) fn new(split: &'a DatasetSplit, descriptions: &Descriptions, vocab: &Vocab, max_len: usize) -> Result<Self> {
        Ok(EvalTarget {
            split,
            encoded: EncodedSplit::new(split, descriptions, vocab, max_len)?,
        })
    }
}

fn episode_result<T: Real>(
    params: &EncoderParams<T>,
    model: &ModelSpec,
    target: &EvalTarget,
    spec: &EpisodeSpec,
    seed: u64,
    index: u64,
) -> Result<EpisodeResult> {
    let r = episode_at(target.split, spec, seed, index)?;
    let ep = target.encoded.materialize(&r, model.loss.use_descriptions)?;
    let mut g = Graph::<T>::new();
    let bound = params.bind(&mut g)?;
    // Eval mode draws nothing from the stream.
    let mut stream = SeedStream::new(seed, index);
    let out = episode_forward(&mut g, &bound, &ep, model, Mode::Eval, &mut stream)?;
    let correct = out
        .scores
        .iter()
        .zip(&ep.query_labels)
        .filter(|(s, &y)| predict(s) == y)
        .count();
    Ok(EpisodeResult {
        correct,
        total: ep.query_labels.len(),
    })
}

/// Query accuracy over episodes `0..episodes` of the stream keyed by `seed`.
/// Episodes run in parallel; counts are combined in index order.
pub(crate) fn evaluate_params<T: Real>(
    params: &EncoderParams<T>,
    model: &ModelSpec,
    target: &EvalTarget,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut spec = spec.clone();
    spec.with_descriptions = model.loss.use_descriptions;
    spec.check_feasible(target.split)?;
    let results: Vec<EpisodeResult> = (0..episodes as u64)
        .into_par_iter()
        .map(|i| episode_result(params, model, target, &spec, seed, i))
        .collect::<Result<_>>()?;
    let correct: usize = results.iter().map(|r| r.correct).sum();
    let total: usize = results.iter().map(|r| r.total).sum();
    if total == 0 {
        return Err(Error::Sampling("evaluation produced no queries".into()));
    }
    Ok(correct as f64 / total as f64)
}

fn evaluate_typed<T: Real>(
    ck: &Checkpoint,
    split: &DatasetSplit,
    descriptions: &Descriptions,
    spec: &EpisodeSpec,
    episodes: usize,
    seeds: &[u64],
) -> Result<Metrics> {
    let params: EncoderParams<T> = ck.encoder.to_params()?;
    let vocab = ck.vocab()?;
    let model = ck.model();
    let target = EvalTarget::new(split, descriptions, &vocab, ck.max_len)?;
    let per_seed = seeds
        .iter()
        .map(|&s| {
            let accuracy = evaluate_params(&params, &model, &target, spec, episodes, derived(s, KEY_EVAL_EPISODES))?;
            Ok(SeedAccuracy { seed: s, accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Metrics::from_seeds(spec, episodes, per_seed))
}

/// Accuracy of a checkpoint on `split`, in eval mode, for each seed's
/// episode stream; mean and std are taken over seeds.
pub fn evaluate(
    ck: &Checkpoint,
    split: &DatasetSplit,
    descriptions: &Descriptions,
    spec: &EpisodeSpec,
    episodes: usize,
    seeds: &[u64],
) -> Result<Metrics> {
    if seeds.is_empty() || episodes == 0 {
        return Err(Error::Config("evaluation needs at least one seed and one episode".into()));
    }
    match ck.encoder.precision.as_str() {
        "f64" => evaluate_typed::<f64>(ck, split, descriptions, spec, episodes, seeds),
        _ => evaluate_typed::<f32>(ck, split, descriptions, spec, episodes, seeds),
    }
}

/// Accuracy of freshly initialized parameters for `seed` on the held-out split.
pub fn untrained_accuracy(config: &RunConfig, data: &Data, seed: u64, episodes: usize) -> Result<f64> {
    let mut enc_cfg = config.encoder.clone();
    enc_cfg.vocab_size = data.vocab.len();
    let params: EncoderParams<f32> = init_params(&enc_cfg, derived(seed, KEY_INIT))?;
    let target = EvalTarget::new(data.eval_split()?, &data.descriptions, &data.vocab, config.max_len)?;
    evaluate_params(
        &params,
        &config.model(),
        &target,
        &config.eval_episode,
        episodes,
        derived(seed, KEY_EVAL_EPISODES),
    )
}
