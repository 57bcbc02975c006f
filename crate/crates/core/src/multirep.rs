//! Representations read from one encoder pass and the concatenated
//! instance/description embeddings built from them.
//!
//! Component order is fixed. Instances: `[avg_pool; cls; mask; e1s; e2s]`.
//! Descriptions: `[avg_pool; cls; mask; cls_drop; mask_drop]`. Slot `k` of an
//! instance pairs with slot `k` of a description, so any selection of slots
//! yields embeddings of equal dimension on both sides.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Real, SeedStream, Var};
use crate::encoder::{BoundEncoder, Hidden};
use crate::error::{Error, Result};
use crate::textproc::{pad_batch, EncodedInput, InputKind};

pub const NUM_SLOTS: usize = 5;
pub const DEFAULT_DESCRIPTION_DROPOUT: f64 = 0.10;

/// One representation slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepTag {
    AvgPool,
    Cls,
    Mask,
    E1s,
    E2s,
}

impl RepTag {
    pub const ALL: [RepTag; NUM_SLOTS] = [RepTag::AvgPool, RepTag::Cls, RepTag::Mask, RepTag::E1s, RepTag::E2s];

    pub fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        INSTANCE_TAGS[self.slot()]
    }

    pub fn description_name(self) -> &'static str {
        DESCRIPTION_TAGS[self.slot()]
    }
}

impl fmt::Display for RepTag {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const INSTANCE_TAGS: [&str; NUM_SLOTS] = ["avg_pool", "cls", "mask", "e1s", "e2s"];
pub const DESCRIPTION_TAGS: [&str; NUM_SLOTS] = ["avg_pool", "cls", "mask", "cls_drop", "mask_drop"];

/// Selectable unit names. `entity_pair` stands for both marker slots.
pub const UNITS: [&str; 4] = ["avg_pool", "cls", "mask", "entity_pair"];

fn unit_tags(name: &str) -> Result<Vec<RepTag>> {
    Ok(match name {
        "avg_pool" => vec![RepTag::AvgPool],
        "cls" => vec![RepTag::Cls],
        "mask" => vec![RepTag::Mask],
        "entity_pair" => vec![RepTag::E1s, RepTag::E2s],
        "e1s" => vec![RepTag::E1s],
        "e2s" => vec![RepTag::E2s],
        other => return Err(Error::Config(format!("unknown representation {other:?}"))),
    })
}

/// Which slots enter the embeddings, plus the description dropout rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepSelector {
    tags: BTreeSet<RepTag>,
    pub description_dropout: f64,
}

impl Default for RepSelector {
    fn default() -> Self {
        Self::full()
    }
}

impl RepSelector {
    pub fn full() -> Self {
        RepSelector {
            tags: RepTag::ALL.into_iter().collect(),
            description_dropout: DEFAULT_DESCRIPTION_DROPOUT,
        }
    }

    pub fn new(tags: impl IntoIterator<Item = RepTag>) -> Result<Self> {
        let tags: BTreeSet<RepTag> = tags.into_iter().collect();
        if tags.is_empty() {
            return Err(Error::Config("representation selector is empty".into()));
        }
        Ok(RepSelector {
            tags,
            description_dropout: DEFAULT_DESCRIPTION_DROPOUT,
        })
    }

    /// Parses unit or slot names (`avg_pool`, `cls`, `mask`, `entity_pair`,
    /// `e1s`, `e2s`) in any order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut tags = Vec::new();
        for n in names {
            tags.extend(unit_tags(n.as_ref())?);
        }
        Self::new(tags)
    }

    pub fn without(&self, unit: &str) -> Result<Self> {
        let drop = unit_tags(unit)?;
        let mut out = Self::new(self.tags.iter().copied().filter(|t| !drop.contains(t)))?;
        out.description_dropout = self.description_dropout;
        Ok(out)
    }

    /// Selected slots in component order.
    pub fn tags(&self) -> Vec<RepTag> {
        self.tags.iter().copied().collect()
    }

    pub fn contains(&self, tag: RepTag) -> bool {
        self.tags.contains(&tag)
    }

    /// Number of selected vectors.
    pub fn m(&self) -> usize {
        self.tags.len()
    }

    pub fn label(&self) -> String {
        self.tags.iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
    }

    /// Every selector with exactly `m` slots, in lexicographic slot order.
    pub fn subsets_of_size(m: usize) -> Vec<RepSelector> {
        let mut out = Vec::new();
        for bits in 1u32..(1 << NUM_SLOTS) {
            if bits.count_ones() as usize == m {
                let tags = RepTag::ALL.iter().copied().filter(|t| bits & (1 << t.slot()) != 0);
                out.push(Self::new(tags).expect("nonempty"));
            }
        }
        out.sort_by_key(|s| s.tags());
        out
    }
}

impl FromStr for RepSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let names: Vec<&str> = s.split([',', '+']).map(str::trim).filter(|x| !x.is_empty()).collect();
        Self::from_names(&names)
    }
}

/// The five slot vectors of one input, each `[d]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RepSet {
    pub kind: InputKind,
    pub slots: [Var; NUM_SLOTS],
}

impl RepSet {
    pub fn get(&self, tag: RepTag) -> Var {
        self.slots[tag.slot()]
    }

    pub fn selected(&self, selector: &RepSelector) -> Vec<Var> {
        selector.tags().into_iter().map(|t| self.get(t)).collect()
    }
}

fn block_weights<T: Real>(h: &Hidden, b: usize, picks: impl Iterator<Item = (usize, T)>) -> Result<Vec<T>> {
    if b >= h.batch {
        return Err(Error::Contract(format!("batch row {b} out of {}", h.batch)));
    }
    let mut w = vec![T::zero(); h.batch * h.width];
    for (pos, v) in picks {
        if pos >= h.width {
            return Err(Error::Contract(format!("position {pos} outside width {}", h.width)));
        }
        w[h.offset(b) + pos] = v;
    }
    Ok(w)
}

/// Mean of the hidden rows of batch row `b` whose mask is 1.
pub fn extract_avg<T: Real>(g: &mut Graph<T>, h: &Hidden, b: usize, attn_mask: &[u8]) -> Result<Var> {
    let n = attn_mask.iter().filter(|&&m| m == 1).count();
    if n == 0 {
        return Err(Error::Contract("average pooling over a fully masked row".into()));
    }
    let inv = T::one() / T::of(n as f64);
    let picks = attn_mask.iter().enumerate().filter(|(_, &m)| m == 1).map(|(p, _)| (p, inv));
    let w = block_weights(h, b, picks)?;
    g.weighted_rows(h.states, &w)
}

fn gather_at<T: Real>(g: &mut Graph<T>, h: &Hidden, b: usize, pos: usize) -> Result<Var> {
    let w = block_weights(h, b, std::iter::once((pos, T::one())))?;
    g.weighted_rows(h.states, &w)
}

pub fn extract_cls<T: Real>(g: &mut Graph<T>, h: &Hidden, b: usize, input: &EncodedInput) -> Result<Var> {
    gather_at(g, h, b, input.pos_cls)
}

pub fn extract_mask<T: Real>(g: &mut Graph<T>, h: &Hidden, b: usize, input: &EncodedInput) -> Result<Var> {
    gather_at(g, h, b, input.pos_mask)
}

/// `(e1s, e2s)` marker states; descriptions have none.
pub fn extract_entity_markers<T: Real>(g: &mut Graph<T>, h: &Hidden, b: usize, input: &EncodedInput) -> Result<(Var, Var)> {
    match (input.kind, input.pos_e1s, input.pos_e2s) {
        (InputKind::Instance, Some(p1), Some(p2)) => Ok((gather_at(g, h, b, p1)?, gather_at(g, h, b, p2)?)),
        _ => Err(Error::Contract("entity markers requested from an input without them".into())),
    }
}

pub fn instance_repset<T: Real>(g: &mut Graph<T>, h: &Hidden, b: usize, input: &EncodedInput) -> Result<RepSet> {
    let avg = extract_avg(g, h, b, &input.attn_mask)?;
    let cls = extract_cls(g, h, b, input)?;
    let mask = extract_mask(g, h, b, input)?;
    let (e1s, e2s) = extract_entity_markers(g, h, b, input)?;
    Ok(RepSet {
        kind: InputKind::Instance,
        slots: [avg, cls, mask, e1s, e2s],
    })
}

/// `[avg; cls; mask; dropout(cls); dropout(mask)]`. In eval mode the last
/// two are the undropped `cls` and `mask`.
pub fn description_repset<T: Real>(
    g: &mut Graph<T>,
    h: &Hidden,
    b: usize,
    input: &EncodedInput,
    rate: f64,
    mode: Mode,
    stream: &mut SeedStream,
) -> Result<RepSet> {
    if input.kind != InputKind::Description {
        return Err(Error::Contract("description embedding of an instance input".into()));
    }
    let avg = extract_avg(g, h, b, &input.attn_mask)?;
    let cls = extract_cls(g, h, b, input)?;
    let mask = extract_mask(g, h, b, input)?;
    let cls_drop = g.dropout(cls, rate, mode, stream)?;
    let mask_drop = g.dropout(mask, rate, mode, stream)?;
    Ok(RepSet {
        kind: InputKind::Description,
        slots: [avg, cls, mask, cls_drop, mask_drop],
    })
}

/// Concatenation of the selected slots in component order. Works for both
/// kinds; instance and description results for one selector have equal size.
pub fn build_embedding<T: Real>(g: &mut Graph<T>, reps: &RepSet, selector: &RepSelector) -> Result<Var> {
    let parts = reps.selected(selector);
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 0)
    }
}

pub fn build_instance_embedding<T: Real>(g: &mut Graph<T>, reps: &RepSet, selector: &RepSelector) -> Result<Var> {
    if reps.kind != InputKind::Instance {
        return Err(Error::Contract("instance embedding from a description rep set".into()));
    }
    build_embedding(g, reps, selector)
}

pub fn build_description_embedding<T: Real>(
    g: &mut Graph<T>,
    h: &Hidden,
    b: usize,
    input: &EncodedInput,
    selector: &RepSelector,
    mode: Mode,
    stream: &mut SeedStream,
) -> Result<Var> {
    let reps = description_repset(g, h, b, input, selector.description_dropout, mode, stream)?;
    build_embedding(g, &reps, selector)
}

/// Encodes `inputs` as one padded batch (a single encoder pass) and returns
/// one rep set per input, in order.
pub fn encode_repsets<T: Real>(
    g: &mut Graph<T>,
    enc: &BoundEncoder,
    inputs: &[EncodedInput],
    description_dropout: f64,
    mode: Mode,
    stream: &mut SeedStream,
) -> Result<Vec<RepSet>> {
    let batch = pad_batch(inputs, 0)?;
    let h = enc.encode(g, &batch, mode, stream)?;
    inputs
        .iter()
        .enumerate()
        .map(|(b, inp)| match inp.kind {
            InputKind::Instance => instance_repset(g, &h, b, inp),
            InputKind::Description => description_repset(g, &h, b, inp, description_dropout, mode, stream),
        })
        .collect()
}

/// One exported vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub split: String,
    pub relation_id: String,
    pub instance_index: usize,
    /// A slot name, or `"full"` for the concatenated embedding.
    pub component: String,
    pub values: Vec<f64>,
}

/// Writes rows as CSV with a header `split,relation_id,instance_index,component,v0,…`.
/// All rows must share one vector length.
pub fn write_embedding_csv<W: Write>(out: W, rows: &[EmbeddingRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    if rows.iter().any(|r| r.values.len() != dim) {
        return Err(Error::Dimension("embedding rows of differing length".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["split", "relation_id", "instance_index", "component"].map(String::from).to_vec();
    header.extend((0..dim).map(|i| format!("v{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.split.clone(), r.relation_id.clone(), r.instance_index.to_string(), r.component.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Validation(format!("csv: {other:?}")),
    }
}
