//! N-way K-shot episode sampling.
//!
//! Sampling works on relation ids and instance indices only; an
//! [`EpisodeRef`] is turned into encoded inputs by [`EncodedSplit::materialize`].
//! Episode `index` of a stream with seed `s` is drawn from ChaCha stream
//! `index` of key `s`, so any episode can be replayed on its own.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Descriptions};
use crate::error::{Error, Result};
use crate::textproc::{encode_description, encode_instance, EncodedInput, Vocab};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n: usize,
    pub k: usize,
    /// Queries per class; `None` means `k`.
    #[serde(default)]
    pub q: Option<usize>,
    #[serde(default = "yes")]
    pub with_descriptions: bool,
}

fn yes() -> bool {
    true
}

impl EpisodeSpec {
    pub fn new(n: usize, k: usize) -> Self {
        EpisodeSpec {
            n,
            k,
            q: None,
            with_descriptions: true,
        }
    }

    pub fn queries(&self) -> usize {
        self.q.unwrap_or(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.k < 1 || self.queries() < 1 {
            return Err(Error::Config(format!(
                "episode needs N >= 2, K >= 1, Q >= 1 (got N={}, K={}, Q={})",
                self.n,
                self.k,
                self.queries()
            )));
        }
        Ok(())
    }

    /// Checks that `split` can supply episodes of this shape.
    pub fn check_feasible(&self, split: &DatasetSplit) -> Result<()> {
        self.validate()?;
        if split.num_relations() < self.n {
            return Err(Error::Config(format!(
                "{}-way episodes need {} relations, split has {}",
                self.n,
                self.n,
                split.num_relations()
            )));
        }
        let need = self.k + self.queries();
        if let Some((rel, insts)) = split.relations.iter().find(|(_, v)| v.len() < need) {
            return Err(Error::Sampling(format!(
                "relation {rel} has {} instances, episodes need {need}",
                insts.len()
            )));
        }
        Ok(())
    }
}

/// Which instances an episode uses. Class `c` is `relations[c]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRef {
    pub seed: u64,
    pub index: u64,
    pub relations: Vec<String>,
    /// `support[c]` holds `K` instance indices of class `c`.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

/// Draws one episode: `N` relations uniformly without replacement, then
/// `K + Q` instances per relation without replacement, the first `K` going
/// to the support set.
pub fn sample_episode<R: Rng>(split: &DatasetSplit, spec: &EpisodeSpec, rng: &mut R) -> Result<EpisodeRef> {
    spec.check_feasible(split)?;
    let ids = split.relation_ids();
    let (k, q) = (spec.k, spec.queries());
    let mut relations = Vec::with_capacity(spec.n);
    let mut support = Vec::with_capacity(spec.n);
    let mut query = Vec::with_capacity(spec.n);
    for r in sample(rng, ids.len(), spec.n).into_iter() {
        let rel = ids[r];
        let picks = sample(rng, split.relations[rel].len(), k + q).into_vec();
        relations.push(rel.to_string());
        support.push(picks[..k].to_vec());
        query.push(picks[k..].to_vec());
    }
    Ok(EpisodeRef {
        seed: 0,
        index: 0,
        relations,
        support,
        query,
    })
}

/// Episode `index` of the stream keyed by `seed`.
pub fn episode_at(split: &DatasetSplit, spec: &EpisodeSpec, seed: u64, index: u64) -> Result<EpisodeRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut ep = sample_episode(split, spec, &mut rng)?;
    ep.seed = seed;
    ep.index = index;
    Ok(ep)
}

/// Episodes `0..count` of the stream keyed by `seed`.
pub fn episode_stream<'a>(
    split: &'a DatasetSplit,
    spec: &'a EpisodeSpec,
    seed: u64,
    count: u64,
) -> impl Iterator<Item = Result<EpisodeRef>> + 'a {
    (0..count).map(move |i| episode_at(split, spec, seed, i))
}

pub fn dump_episodes_json(episodes: &[EpisodeRef]) -> Result<String> {
    Ok(serde_json::to_string_pretty(episodes)?)
}

/// Every instance and description of a split, encoded once.
#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub instances: BTreeMap<String, Vec<EncodedInput>>,
    pub descriptions: BTreeMap<String, EncodedInput>,
}

impl EncodedSplit {
    /// Descriptions for relations outside `split` are ignored.
    pub fn new(split: &DatasetSplit, descriptions: &Descriptions, vocab: &Vocab, max_len: usize) -> Result<Self> {
        let mut instances = BTreeMap::new();
        for (rel, insts) in &split.relations {
            let enc = insts
                .iter()
                .map(|i| encode_instance(i, vocab, max_len))
                .collect::<Result<Vec<_>>>()?;
            instances.insert(rel.clone(), enc);
        }
        let mut descs = BTreeMap::new();
        for rel in split.relations.keys() {
            if let Some(d) = descriptions.get(rel) {
                descs.insert(rel.clone(), encode_description(d, vocab, max_len)?);
            }
        }
        Ok(EncodedSplit {
            instances,
            descriptions: descs,
        })
    }

    pub fn materialize(&self, r: &EpisodeRef, with_descriptions: bool) -> Result<Episode> {
        let mut ep = Episode {
            source: r.clone(),
            support: Vec::new(),
            support_labels: Vec::new(),
            query: Vec::new(),
            query_labels: Vec::new(),
            descriptions: None,
        };
        for (c, rel) in r.relations.iter().enumerate() {
            let pool = self
                .instances
                .get(rel)
                .ok_or_else(|| Error::Sampling(format!("relation {rel} not in encoded split")))?;
            let fetch = |i: usize| {
                pool.get(i)
                    .cloned()
                    .ok_or_else(|| Error::Sampling(format!("instance {i} of relation {rel} out of range")))
            };
            for &i in &r.support[c] {
                ep.support.push(fetch(i)?);
                ep.support_labels.push(c);
            }
            for &i in &r.query[c] {
                ep.query.push(fetch(i)?);
                ep.query_labels.push(c);
            }
        }
        if with_descriptions {
            let descs = r
                .relations
                .iter()
                .map(|rel| {
                    self.descriptions
                        .get(rel)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("no description for relation {rel}")))
                })
                .collect::<Result<Vec<_>>>()?;
            ep.descriptions = Some(descs);
        }
        Ok(ep)
    }
}

/// Encoded episode. Support and query are class-major: class `c` occupies
/// `c·K .. (c+1)·K` of the support set.
#[derive(Clone, Debug)]
pub struct Episode {
    pub source: EpisodeRef,
    pub support: Vec<EncodedInput>,
    pub support_labels: Vec<usize>,
    pub query: Vec<EncodedInput>,
    pub query_labels: Vec<usize>,
    pub descriptions: Option<Vec<EncodedInput>>,
}

impl Episode {
    pub fn n(&self) -> usize {
        self.source.relations.len()
    }

    pub fn k(&self) -> usize {
        self.source.support.first().map_or(0, Vec::len)
    }
}
