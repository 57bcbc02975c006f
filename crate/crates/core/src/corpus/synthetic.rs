//! Desk-scale stand-in for FewRel.
//!
//! Every relation owns a connective phrase: a short sequence of distinct
//! words from a small shared set, placed between the two entity names.
//! Relations come in confusable pairs that draw entities from the same pools,
//! use the same phrase words in reverse order and differ in surface order.
//! Held-out relations therefore use new combinations of words that training
//! sentences already show between entities. With `connective_inventory` set,
//! every sentence also carries the remaining connective words at random
//! positions outside the entity core, so bag-of-words overlap says nothing
//! about the label and only the words between the entities do.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, Descriptions, RelationDescription, RelationInstance, SplitRole};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Total relation count (at least 4).
    pub relations: usize,
    pub instances_per_relation: usize,
    /// Relations assigned to the training split; the rest form the eval split.
    pub train_relations: usize,
    /// Size of the shared filler vocabulary.
    pub vocab_size: usize,
    /// Sentence length range in tokens, inclusive. Sentences grow past
    /// `max_len` when the entity core and inventory need more room.
    pub min_len: usize,
    pub max_len: usize,
    /// Names per entity pool.
    pub entity_pool: usize,
    /// Size of the shared set connective phrases are built from.
    pub connective_words: usize,
    /// Words per connective phrase.
    pub phrase_len: usize,
    /// Scatter every other connective word of the corpus through each sentence.
    pub connective_inventory: bool,
    /// Most words placed before the entity core (`None`: anywhere).
    pub lead_max: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            relations: 12,
            instances_per_relation: 50,
            train_relations: 8,
            vocab_size: 400,
            min_len: 16,
            max_len: 24,
            entity_pool: 60,
            connective_words: 6,
            phrase_len: 2,
            connective_inventory: true,
            lead_max: Some(2),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.relations < 4 {
            return Err(Error::Config(format!("synthetic corpus needs at least 4 relations, got {}", self.relations)));
        }
        if self.train_relations == 0 || self.train_relations >= self.relations {
            return Err(Error::Config(format!(
                "train_relations must be in 1..{}, got {}",
                self.relations, self.train_relations
            )));
        }
        if self.instances_per_relation == 0 || self.vocab_size == 0 || self.entity_pool == 0 {
            return Err(Error::Config("instance, vocabulary and pool sizes must be positive".into()));
        }
        if self.phrase_len == 0 || self.phrase_len > self.connective_words {
            return Err(Error::Config(format!(
                "phrase length {} must be in 1..={}",
                self.phrase_len, self.connective_words
            )));
        }
        let available = combinations(self.connective_words, self.phrase_len).len();
        if available < self.distinct_phrases() {
            return Err(Error::Config(format!(
                "{} connective words give {available} phrases of length {}, need {}",
                self.connective_words,
                self.phrase_len,
                self.distinct_phrases()
            )));
        }
        if self.min_len > self.max_len || self.max_len < 3 {
            return Err(Error::Config(format!(
                "invalid sentence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }

    /// Word sets needed: one per pair when pair members can reverse the
    /// phrase, otherwise one per relation.
    fn distinct_phrases(&self) -> usize {
        if self.phrase_len >= 2 {
            self.relations.div_ceil(2)
        } else {
            self.relations
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: DatasetSplit,
    pub eval: DatasetSplit,
    pub descriptions: Descriptions,
}

struct WordSource {
    used: HashSet<String>,
}

impl WordSource {
    fn fresh(&mut self, rng: &mut ChaCha8Rng) -> String {
        const C: &[u8] = b"bdfgklmnprstvz";
        const V: &[u8] = b"aeiou";
        loop {
            let syllables = rng.gen_range(2..=3);
            let w: String = (0..syllables)
                .flat_map(|_| [C[rng.gen_range(0..C.len())] as char, V[rng.gen_range(0..V.len())] as char])
                .collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    /// Entity names of one or two words.
    fn name(&mut self, rng: &mut ChaCha8Rng) -> Vec<String> {
        let n = if rng.gen_bool(0.3) { 2 } else { 1 };
        (0..n).map(|_| self.fresh(rng)).collect()
    }
}

struct RelationTemplate {
    id: String,
    name: String,
    phrase: Vec<String>,
    head_first: bool,
    pair: usize,
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = WordSource { used: HashSet::new() };

    let filler: Vec<String> = (0..spec.vocab_size).map(|_| words.fresh(&mut rng)).collect();
    let pairs = spec.relations.div_ceil(2);
    let pools: Vec<(Vec<Vec<String>>, Vec<Vec<String>>)> = (0..pairs)
        .map(|_| {
            let heads = (0..spec.entity_pool).map(|_| words.name(&mut rng)).collect();
            let tails = (0..spec.entity_pool).map(|_| words.name(&mut rng)).collect();
            (heads, tails)
        })
        .collect();

    let inventory: Vec<String> = (0..spec.connective_words).map(|_| words.fresh(&mut rng)).collect();
    let mut sets = combinations(spec.connective_words, spec.phrase_len);
    sets.shuffle(&mut rng);
    let reversible = spec.phrase_len >= 2;
    let templates: Vec<RelationTemplate> = (0..spec.relations)
        .map(|r| {
            let mut idx = if reversible { sets[r / 2].clone() } else { sets[r].clone() };
            if reversible && r % 2 == 1 {
                idx.reverse();
            }
            RelationTemplate {
                id: format!("S{r:02}"),
                name: words.fresh(&mut rng),
                phrase: idx.iter().map(|&i| inventory[i].clone()).collect(),
                // Pair members differ in surface order.
                head_first: r % 2 == 0,
                pair: r / 2,
            }
        })
        .collect();

    let mut all = BTreeMap::new();
    let mut descriptions = BTreeMap::new();
    for tpl in &templates {
        let (heads, tails) = &pools[tpl.pair];
        let insts = (0..spec.instances_per_relation)
            .map(|_| {
                let head = heads.choose(&mut rng).expect("non-empty pool").clone();
                let tail = tails.choose(&mut rng).expect("non-empty pool").clone();
                let others: Vec<&String> = if spec.connective_inventory {
                    inventory.iter().filter(|w| !tpl.phrase.contains(w)).collect()
                } else {
                    Vec::new()
                };
                sentence(spec, &mut rng, &filler, &others, tpl, &head, &tail)
            })
            .collect::<Vec<_>>();
        all.insert(tpl.id.clone(), insts);

        let (a, b) = if tpl.head_first { ("subject", "object") } else { ("object", "subject") };
        let text = format!("{a} {} {b}", tpl.phrase.join(" "));
        descriptions.insert(
            tpl.id.clone(),
            RelationDescription {
                relation_id: tpl.id.clone(),
                name: tpl.name.clone(),
                description_text: text,
            },
        );
    }

    let mut ids: Vec<String> = all.keys().cloned().collect();
    ids.shuffle(&mut rng);
    let train_ids: BTreeSet<String> = ids[..spec.train_relations].iter().cloned().collect();
    let full = DatasetSplit {
        role: SplitRole::Train,
        relations: all,
    };
    let (train, eval) = full.split_relations(&train_ids)?;
    Ok(SyntheticCorpus {
        train: train.with_role(SplitRole::Train),
        eval: eval.with_role(SplitRole::Validation),
        descriptions,
    })
}

#[allow(clippy::too_many_arguments)]
fn sentence(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
    filler: &[String],
    others: &[&String],
    tpl: &RelationTemplate,
    head: &[String],
    tail: &[String],
) -> RelationInstance {
    let (first, second) = if tpl.head_first { (head, tail) } else { (tail, head) };
    let core = first.len() + tpl.phrase.len() + second.len();
    let target = rng.gen_range(spec.min_len..=spec.max_len).max(core + others.len());
    let mut outside: Vec<String> = others.iter().map(|w| w.to_string()).collect();
    outside.extend((0..target - core - others.len()).map(|_| filler.choose(rng).expect("filler").clone()));
    outside.shuffle(rng);
    let before = rng.gen_range(0..=spec.lead_max.map_or(outside.len(), |m| m.min(outside.len())));

    let mut tokens: Vec<String> = Vec::with_capacity(target);
    tokens.extend_from_slice(&outside[..before]);
    let first_span = (tokens.len(), tokens.len() + first.len() - 1);
    tokens.extend_from_slice(first);
    tokens.extend_from_slice(&tpl.phrase);
    let second_span = (tokens.len(), tokens.len() + second.len() - 1);
    tokens.extend_from_slice(second);
    tokens.extend_from_slice(&outside[before..]);
    let (head_span, tail_span) = if tpl.head_first {
        (first_span, second_span)
    } else {
        (second_span, first_span)
    };
    RelationInstance {
        tokens,
        head_span,
        tail_span,
        relation_id: tpl.id.clone(),
    }
}
