use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::{derived, evaluate, mean_std, train_seed, Checkpoint, Data, RunConfig, KEY_EVAL_EPISODES};
use crate::autodiff::{Graph, Mode, SeedStream};
use crate::corpus::{DatasetSplit, Descriptions};
use crate::encoder::EncoderParams;
use crate::episodes::{episode_at, EncodedSplit, EpisodeSpec};
use crate::error::{Error, Result};
use crate::multirep::{build_embedding, csv_err, encode_repsets, EmbeddingRow, RepSelector};
use crate::objectives::ScoreMode;

/// One configuration change relative to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Full,
    WoRcl,
    WoRdcl,
    /// Both contrastive terms removed.
    WoContrastive,
    WoAvgPool,
    WoEntityPair,
    WoCls,
    WoMask,
    PrototypeAddition,
}

impl AblationArm {
    /// The seven variants compared against the full model.
    pub const TABLE: [AblationArm; 7] = [
        AblationArm::WoRcl,
        AblationArm::WoRdcl,
        AblationArm::WoAvgPool,
        AblationArm::WoEntityPair,
        AblationArm::WoCls,
        AblationArm::WoMask,
        AblationArm::PrototypeAddition,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::WoRcl => "wo_rcl",
            AblationArm::WoRdcl => "wo_rdcl",
            AblationArm::WoContrastive => "wo_contrastive",
            AblationArm::WoAvgPool => "wo_avg_pool",
            AblationArm::WoEntityPair => "wo_entity_pair",
            AblationArm::WoCls => "wo_cls",
            AblationArm::WoMask => "wo_mask",
            AblationArm::PrototypeAddition => "prototype_addition",
        }
    }

    pub fn is_representation_removal(self) -> bool {
        matches!(
            self,
            AblationArm::WoAvgPool | AblationArm::WoEntityPair | AblationArm::WoCls | AblationArm::WoMask
        )
    }

    pub fn apply(self, base: &RunConfig) -> Result<RunConfig> {
        let mut c = base.clone();
        match self {
            AblationArm::Full => {}
            AblationArm::WoRcl => c.loss.use_rcl = false,
            AblationArm::WoRdcl => c.loss.use_rdcl = false,
            AblationArm::WoContrastive => {
                c.loss.use_rcl = false;
                c.loss.use_rdcl = false;
            }
            AblationArm::WoAvgPool => c.representations = c.representations.without("avg_pool")?,
            AblationArm::WoEntityPair => c.representations = c.representations.without("entity_pair")?,
            AblationArm::WoCls => c.representations = c.representations.without("cls")?,
            AblationArm::WoMask => c.representations = c.representations.without("mask")?,
            AblationArm::PrototypeAddition => c.loss.score_mode = ScoreMode::PrototypeAddition,
        }
        Ok(c)
    }
}

impl fmt::Display for AblationArm {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let all = [AblationArm::Full, AblationArm::WoContrastive]
            .into_iter()
            .chain(AblationArm::TABLE);
        for a in all {
            if a.name() == s {
                return Ok(a);
            }
        }
        Err(Error::Config(format!("unknown ablation arm {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub n_way: usize,
    pub k_shot: usize,
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

/// Trains and evaluates the base model with seed `seed` and returns the
/// held-out accuracy (episodes keyed by the same seed).
pub(crate) fn train_and_score(config: &RunConfig, data: &Data, seed: u64) -> Result<f64> {
    let outcome = train_seed(config, data, seed)?;
    let m = evaluate(
        &outcome.checkpoint,
        data.eval_split()?,
        &data.descriptions,
        &config.eval_episode,
        config.eval_episodes,
        &[seed],
    )?;
    Ok(m.accuracy_mean)
}

/// One row per arm, each averaged over `config.seeds`.
pub fn ablate(config: &RunConfig, data: &Data, arms: &[AblationArm]) -> Result<Vec<AblationRow>> {
    arms.iter()
        .map(|&arm| {
            let c = arm.apply(config)?;
            let per_seed = config
                .seeds
                .iter()
                .map(|&s| train_and_score(&c, data, s))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&per_seed);
            info!("ablation {arm}: {mean:.4} ± {std:.4}");
            Ok(AblationRow {
                arm,
                n_way: c.eval_episode.n,
                k_shot: c.eval_episode.k,
                mean,
                std,
                per_seed,
            })
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["arm", "n_way", "k_shot", "mean", "std"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.arm.name().to_string(),
            r.n_way.to_string(),
            r.k_shot.to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.std),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub subset: String,
    pub seed: u64,
    pub accuracy: f64,
}

/// Per-M aggregate: mean over all subsets and seeds, and the across-subset
/// standard deviation averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub m: usize,
    pub mean: f64,
    pub subset_std: f64,
}

impl SweepSummary {
    pub fn from_rows(rows: &[SweepRow]) -> Vec<SweepSummary> {
        let ms: BTreeSet<usize> = rows.iter().map(|r| r.m).collect();
        ms.into_iter()
            .map(|m| {
                let at: Vec<&SweepRow> = rows.iter().filter(|r| r.m == m).collect();
                let (mean, _) = mean_std(&at.iter().map(|r| r.accuracy).collect::<Vec<_>>());
                let seeds: BTreeSet<u64> = at.iter().map(|r| r.seed).collect();
                let stds: Vec<f64> = seeds
                    .iter()
                    .map(|&s| mean_std(&at.iter().filter(|r| r.seed == s).map(|r| r.accuracy).collect::<Vec<_>>()).1)
                    .collect();
                SweepSummary {
                    m,
                    mean,
                    subset_std: mean_std(&stds).0,
                }
            })
            .collect()
    }
}

/// Trains and evaluates every slot subset of every size in `ms` for every
/// configured seed.
pub fn sweep_m(config: &RunConfig, data: &Data, ms: &[usize]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &m in ms {
        let subsets = RepSelector::subsets_of_size(m);
        if subsets.is_empty() {
            return Err(Error::Config(format!("no representation subsets of size {m}")));
        }
        for sel in subsets {
            let mut c = config.clone();
            let rate = c.representations.description_dropout;
            c.representations = sel;
            c.representations.description_dropout = rate;
            for &seed in &config.seeds {
                let accuracy = train_and_score(&c, data, seed)?;
                info!("sweep M={m} {}: seed {seed} accuracy {accuracy:.4}", c.representations.label());
                rows.push(SweepRow {
                    m,
                    subset: c.representations.label(),
                    seed,
                    accuracy,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["M", "subset", "seed", "accuracy"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.m.to_string(), r.subset.clone(), r.seed.to_string(), format!("{:.6}", r.accuracy)])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Support-set embeddings of `count` distinct instances drawn from episodes
/// of `split`, in eval mode. With `components`, each instance also gets one
/// row per selected slot.
#[allow(clippy::too_many_arguments)]
pub fn export_embeddings(
    ck: &Checkpoint,
    split: &DatasetSplit,
    split_name: &str,
    descriptions: &Descriptions,
    spec: &EpisodeSpec,
    count: usize,
    seed: u64,
    components: bool,
) -> Result<Vec<EmbeddingRow>> {
    let params: EncoderParams<f64> = ck.encoder.to_params()?;
    let vocab = ck.vocab()?;
    let sel = &ck.representations;
    let encoded = EncodedSplit::new(split, descriptions, &vocab, ck.max_len)?;
    let total: usize = split.num_instances();
    if count > total {
        return Err(Error::Sampling(format!("asked for {count} embeddings from {total} instances")));
    }
    let ep_seed = derived(seed, KEY_EVAL_EPISODES ^ 0x5a);
    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    let mut index = 0u64;
    while seen.len() < count {
        if index > 1000 * count as u64 + 1000 {
            return Err(Error::Sampling("could not collect enough distinct support instances".into()));
        }
        let r = episode_at(split, spec, ep_seed, index)?;
        index += 1;
        let ep = encoded.materialize(&r, false)?;
        let mut g = Graph::<f64>::new();
        let bound = params.bind(&mut g)?;
        let reps = encode_repsets(&mut g, &bound, &ep.support, 0.0, Mode::Eval, &mut SeedStream::new(seed, index))?;
        for (c, rel) in r.relations.iter().enumerate() {
            for (j, &inst) in r.support[c].iter().enumerate() {
                if seen.len() >= count || !seen.insert((rel.clone(), inst)) {
                    continue;
                }
                let rep = &reps[c * spec.k + j];
                let full = build_embedding(&mut g, rep, sel)?;
                let mut push = |component: &str, values: Vec<f64>| {
                    rows.push(EmbeddingRow {
                        split: split_name.to_string(),
                        relation_id: rel.clone(),
                        instance_index: inst,
                        component: component.to_string(),
                        values,
                    })
                };
                push("full", g.value(full).to_f64_vec());
                if components {
                    for t in sel.tags() {
                        push(t.name(), g.value(rep.get(t)).to_f64_vec());
                    }
                }
            }
        }
    }
    Ok(rows)
}
