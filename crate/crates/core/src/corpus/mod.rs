//! Relation-classification corpora: FewRel-format ingest, relation
//! descriptions, synthetic generation, and disjoint relation splits.

mod fewrel;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fewrel::{
    load_descriptions_json, load_fewrel_json, parse_descriptions, parse_fewrel, save_descriptions_json, save_fewrel_json,
    to_fewrel_value,
};
pub use synthetic::{generate_synthetic, SyntheticCorpus, SyntheticSpec};

/// Inclusive token span `(start, end)`.
pub type Span = (usize, usize);

/// One sentence with its head and tail entity spans.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub tokens: Vec<String>,
    pub head_span: Span,
    pub tail_span: Span,
    pub relation_id: String,
}

impl RelationInstance {
    /// Checks that both spans lie inside the sentence and do not overlap.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        for (name, (s, e)) in [("head", self.head_span), ("tail", self.tail_span)] {
            if s > e || e >= n {
                return Err(Error::Validation(format!(
                    "{name} span ({s}, {e}) outside {n} tokens in relation {}",
                    self.relation_id
                )));
            }
        }
        let (hs, he) = self.head_span;
        let (ts, te) = self.tail_span;
        if hs <= te && ts <= he {
            return Err(Error::Validation(format!(
                "head span ({hs}, {he}) overlaps tail span ({ts}, {te}) in relation {}",
                self.relation_id
            )));
        }
        Ok(())
    }

    pub fn head_tokens(&self) -> &[String] {
        &self.tokens[self.head_span.0..=self.head_span.1]
    }

    pub fn tail_tokens(&self) -> &[String] {
        &self.tokens[self.tail_span.0..=self.tail_span.1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationDescription {
    pub relation_id: String,
    pub name: String,
    pub description_text: String,
}

pub type Descriptions = BTreeMap<String, RelationDescription>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Validation,
    Test,
}

/// Instances grouped by relation. Relation ids iterate in sorted order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub role: SplitRole,
    pub relations: BTreeMap<String, Vec<RelationInstance>>,
}

impl DatasetSplit {
    pub fn new(role: SplitRole) -> Self {
        DatasetSplit {
            role,
            relations: BTreeMap::new(),
        }
    }

    pub fn relation_ids(&self) -> Vec<&str> {
        self.relations.keys().map(String::as_str).collect()
    }

    pub fn relation_set(&self) -> BTreeSet<String> {
        self.relations.keys().cloned().collect()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_instances(&self) -> usize {
        self.relations.values().map(Vec::len).sum()
    }

    pub fn instances(&self) -> impl Iterator<Item = &RelationInstance> {
        self.relations.values().flatten()
    }

    /// Moves `ids` into the first returned split and everything else into
    /// the second. Both keep this split's role.
    pub fn split_relations(&self, ids: &BTreeSet<String>) -> Result<(DatasetSplit, DatasetSplit)> {
        if let Some(unknown) = ids.iter().find(|id| !self.relations.contains_key(*id)) {
            return Err(Error::Validation(format!("unknown relation id {unknown}")));
        }
        let mut chosen = DatasetSplit::new(self.role);
        let mut rest = DatasetSplit::new(self.role);
        for (id, insts) in &self.relations {
            let target = if ids.contains(id) { &mut chosen } else { &mut rest };
            target.relations.insert(id.clone(), insts.clone());
        }
        Ok((chosen, rest))
    }

    pub fn with_role(mut self, role: SplitRole) -> Self {
        self.role = role;
        self
    }
}

/// Fails when any two of the given splits share a relation id.
pub fn check_disjoint(splits: &[&DatasetSplit]) -> Result<()> {
    for (i, a) in splits.iter().enumerate() {
        for b in &splits[i + 1..] {
            if let Some(shared) = a.relations.keys().find(|k| b.relations.contains_key(*k)) {
                return Err(Error::Validation(format!(
                    "relation {shared} appears in both {:?} and {:?} splits",
                    a.role, b.role
                )));
            }
        }
    }
    Ok(())
}
