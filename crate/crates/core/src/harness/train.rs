use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate_params, EvalTarget};
use super::model::episode_forward;
use super::optim::Adam;
use super::{
    breakdown_text, derived, Checkpoint, Data, Metrics, Precision, RunConfig, SeedAccuracy, KEY_DROPOUT, KEY_INIT,
    KEY_TRAIN_EPISODES, KEY_VAL_EPISODES,
};
use crate::autodiff::{Graph, Mode, Real, SeedStream};
use crate::encoder::{init_params, EncoderParams};
use crate::episodes::{episode_at, EncodedSplit};
use crate::error::{Error, Result};
use crate::objectives::LossBreakdown;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_ce: f64,
    pub l_rcl: f64,
    pub l_rdcl: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(step: usize, b: &LossBreakdown) -> Self {
        LossRecord {
            step,
            l_ce: b.l_ce,
            l_rcl: b.l_rcl,
            l_rdcl: b.l_rdcl,
            total: b.total,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub history: Vec<LossRecord>,
    /// Validation accuracy of the kept parameters, when validation ran.
    pub best_val: Option<f64>,
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Divergence {
            step,
            breakdown: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains one model for `seed`. `on_step` sees every step's summed breakdown.
pub fn train_seed_with<T: Real>(
    config: &RunConfig,
    data: &Data,
    seed: u64,
    mut on_step: impl FnMut(usize, &LossBreakdown),
) -> Result<TrainOutcome> {
    let config = config.with_descriptions_synced();
    config.validate()?;
    let mut enc_cfg = config.encoder.clone();
    enc_cfg.vocab_size = data.vocab.len();
    let spec = &config.train_episode;
    spec.check_feasible(&data.train)?;
    let model = config.model();
    let encoded = EncodedSplit::new(&data.train, &data.descriptions, &data.vocab, config.max_len)?;
    let val_target = match (&data.val, config.val_every) {
        (Some(val), every) if every > 0 => Some(EvalTarget::new(val, &data.descriptions, &data.vocab, config.max_len)?),
        _ => None,
    };

    let mut params: EncoderParams<T> = init_params(&enc_cfg, derived(seed, KEY_INIT))?;
    let mut adam = Adam::new(config.optimizer.clone(), params.tensors());
    let episode_seed = derived(seed, KEY_TRAIN_EPISODES);
    let dropout_seed = derived(seed, KEY_DROPOUT);
    let mut history = Vec::new();
    let mut best: Option<(f64, EncoderParams<T>, usize)> = None;

    for step in 0..config.iterations {
        let mut g = Graph::<T>::new();
        let bound = params.bind(&mut g)?;
        let mut losses = Vec::with_capacity(config.batch_episodes);
        let mut sum = LossBreakdown::default();
        for b in 0..config.batch_episodes {
            let index = (step * config.batch_episodes + b) as u64;
            let r = episode_at(&data.train, spec, episode_seed, index)?;
            let ep = encoded.materialize(&r, spec.with_descriptions)?;
            let mut stream = SeedStream::keyed(dropout_seed, &[step as u64, b as u64]);
            let out = episode_forward(&mut g, &bound, &ep, &model, Mode::Train, &mut stream).map_err(|e| divergence(step, e))?;
            sum = sum.add(&out.breakdown);
            losses.push(out.loss);
        }
        if !sum.is_finite() {
            return Err(Error::Divergence {
                step,
                breakdown: breakdown_text(&sum),
            });
        }
        let total = if losses.len() == 1 {
            losses[0]
        } else {
            let s = g.stack(&losses).map_err(|e| divergence(step, e))?;
            g.sum(s).map_err(|e| divergence(step, e))?
        };
        let grads = g.backward(total)?;
        let gs = bound.vars().iter().map(|&v| grads.wrt(v)).collect::<Result<Vec<_>>>()?;
        adam.step(params.tensors_mut(), &gs)?;
        if params.tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                step,
                breakdown: format!("parameters became non-finite after update; {}", breakdown_text(&sum)),
            });
        }

        on_step(step, &sum);
        if step % config.log_every.max(1) == 0 || step + 1 == config.iterations {
            history.push(LossRecord::new(step, &sum));
            info!("seed {seed} step {step}: {}", breakdown_text(&sum));
        }
        if let Some(target) = &val_target {
            if (step + 1) % config.val_every == 0 || step + 1 == config.iterations {
                let acc = evaluate_params(
                    &params,
                    &model,
                    target,
                    &config.eval_episode,
                    config.val_episodes,
                    derived(seed, KEY_VAL_EPISODES),
                )?;
                info!("seed {seed} step {step}: validation accuracy {acc:.4}");
                if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                    best = Some((acc, params.clone(), step + 1));
                }
            }
        }
    }

    let (best_val, kept, step) = match best {
        Some((acc, p, s)) => (Some(acc), p, s),
        None => (None, params, config.iterations),
    };
    Ok(TrainOutcome {
        seed,
        checkpoint: Checkpoint::new(&kept, &data.vocab, &config, seed, step),
        history,
        best_val,
    })
}

pub fn train_seed(config: &RunConfig, data: &Data, seed: u64) -> Result<TrainOutcome> {
    match config.precision {
        Precision::F32 => train_seed_with::<f32>(config, data, seed, |_, _| {}),
        Precision::F64 => train_seed_with::<f64>(config, data, seed, |_, _| {}),
    }
}

fn write_jsonl(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in history {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Trains one model per configured seed and evaluates each on the held-out
/// split (if any) with episodes keyed by the same seed. With `out`, writes
/// `checkpoint-seed<S>.json`, `train-seed<S>.jsonl` and `metrics.json`.
pub fn train(config: &RunConfig, data: &Data, out: Option<&Path>) -> Result<(Vec<TrainOutcome>, Metrics)> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut outcomes = Vec::new();
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let outcome = train_seed(config, data, seed)?;
        if let Some(dir) = out {
            outcome.checkpoint.save(dir.join(format!("checkpoint-seed{seed}.json")))?;
            write_jsonl(&dir.join(format!("train-seed{seed}.jsonl")), &outcome.history)?;
        }
        if let Ok(split) = data.eval_split() {
            let m = super::evaluate(
                &outcome.checkpoint,
                split,
                &data.descriptions,
                &config.eval_episode,
                config.eval_episodes,
                &[seed],
            )?;
            per_seed.push(SeedAccuracy {
                seed,
                accuracy: m.accuracy_mean,
            });
        }
        outcomes.push(outcome);
    }
    let mut metrics = Metrics::from_seeds(&config.eval_episode, config.eval_episodes, per_seed);
    metrics.history = outcomes.first().map(|o| o.history.clone()).unwrap_or_default();
    if let Some(dir) = out {
        metrics.save(dir.join("metrics.json"))?;
    }
    Ok((outcomes, metrics))
}
