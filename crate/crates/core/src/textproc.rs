//! Vocabulary, entity markers, input templates, encoding and padding.
//!
//! Instance template: `[CLS] <head> , [MASK] , <tail> [SEP] <marked text>`.
//! Description template: `[CLS] [MASK] : <name> , <description>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, Descriptions, RelationDescription, RelationInstance};
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const E1S: &str = "[E1S]";
pub const E1E: &str = "[E1E]";
pub const E2S: &str = "[E2S]";
pub const E2E: &str = "[E2E]";

pub const SPECIALS: [&str; 9] = [PAD, UNK, CLS, SEP, MASK, E1S, E1E, E2S, E2E];

/// Literal punctuation used by the templates; always in the vocabulary.
pub const TEMPLATE_TOKENS: [&str; 2] = [",", ":"];

pub fn is_special(tok: &str) -> bool {
    SPECIALS.contains(&tok)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from an ordered token list whose first entries are the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Validation("vocabulary must start with the special tokens in order".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(1)
    }

    pub fn contains(&self, tok: &str) -> bool {
        self.index.contains_key(tok)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn special_id(&self, tok: &str) -> usize {
        debug_assert!(is_special(tok));
        self.index[tok]
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

pub fn normalize(tok: &str) -> String {
    if is_special(tok) {
        tok.to_string()
    } else {
        tok.to_lowercase()
    }
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(normalize)
}

/// Counts lowercased surface tokens of instances and descriptions. Order:
/// specials, template punctuation, then surviving tokens by descending
/// frequency with ties broken lexicographically.
pub fn build_vocab(splits: &[&DatasetSplit], descriptions: &Descriptions, min_freq: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for split in splits {
        for inst in split.instances() {
            any = true;
            for t in &inst.tokens {
                *counts.entry(normalize(t)).or_default() += 1;
            }
        }
    }
    for d in descriptions.values() {
        any = true;
        for t in split_words(&d.name).chain(split_words(&d.description_text)) {
            *counts.entry(t).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::Validation("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut survivors: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !is_special(t) && !TEMPLATE_TOKENS.contains(&t.as_str()))
        .collect();
    survivors.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS
        .iter()
        .chain(TEMPLATE_TOKENS.iter())
        .map(|s| s.to_string())
        .chain(survivors.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// Wraps the head span in `[E1S] … [E1E]` and the tail span in `[E2S] … [E2E]`.
pub fn apply_entity_markers(inst: &RelationInstance) -> Result<Vec<String>> {
    inst.validate()?;
    let (hs, he) = inst.head_span;
    let (ts, te) = inst.tail_span;
    let mut out = Vec::with_capacity(inst.tokens.len() + 4);
    for (i, tok) in inst.tokens.iter().enumerate() {
        if i == hs {
            out.push(E1S.to_string());
        }
        if i == ts {
            out.push(E2S.to_string());
        }
        out.push(normalize(tok));
        if i == he {
            out.push(E1E.to_string());
        }
        if i == te {
            out.push(E2E.to_string());
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    Instance,
    Description,
}

pub fn render_instance_template(inst: &RelationInstance) -> Result<Vec<String>> {
    let marked = apply_entity_markers(inst)?;
    let mut out = vec![CLS.to_string()];
    out.extend(inst.head_tokens().iter().map(|t| normalize(t)));
    out.push(",".into());
    out.push(MASK.into());
    out.push(",".into());
    out.extend(inst.tail_tokens().iter().map(|t| normalize(t)));
    out.push(SEP.into());
    out.extend(marked);
    Ok(out)
}

pub fn render_description_template(desc: &RelationDescription) -> Vec<String> {
    let mut out = vec![CLS.to_string(), MASK.to_string(), ":".to_string()];
    out.extend(split_words(&desc.name));
    let text: Vec<String> = split_words(&desc.description_text).collect();
    if !text.is_empty() {
        out.push(",".into());
        out.extend(text);
    }
    out
}

/// Token ids plus the positions every representation is read from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub attn_mask: Vec<u8>,
    pub pos_cls: usize,
    pub pos_mask: usize,
    pub pos_e1s: Option<usize>,
    pub pos_e2s: Option<usize>,
    pub kind: InputKind,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Maps a rendered sequence to ids. Sequences longer than `max_len` lose
/// plain tokens after the last special token; if a special token still sits
/// beyond `max_len` the input cannot be encoded.
pub fn tokenize_encode(tokens: &[String], vocab: &Vocab, max_len: usize, kind: InputKind) -> Result<EncodedInput> {
    let mut toks: Vec<&str> = tokens.iter().map(String::as_str).collect();
    if toks.len() > max_len {
        let last_special = toks.iter().rposition(|t| is_special(t)).unwrap_or(0);
        if last_special >= max_len {
            return Err(Error::Encoding(format!(
                "special token {} at position {last_special} does not fit in max_len {max_len}",
                toks[last_special]
            )));
        }
        toks.truncate(max_len);
    }
    let ids: Vec<usize> = toks.iter().map(|t| vocab.id(t)).collect();
    let find = |s: &str| toks.iter().position(|t| *t == s);
    let pos_cls = find(CLS).filter(|&p| p == 0).ok_or_else(|| Error::Encoding("[CLS] must open the sequence".into()))?;
    let pos_mask = find(MASK).ok_or_else(|| Error::Encoding("sequence has no [MASK]".into()))?;
    let (pos_e1s, pos_e2s) = match kind {
        InputKind::Instance => (
            Some(find(E1S).ok_or_else(|| Error::Encoding("instance has no [E1S]".into()))?),
            Some(find(E2S).ok_or_else(|| Error::Encoding("instance has no [E2S]".into()))?),
        ),
        InputKind::Description => {
            if find(E1S).is_some() || find(E2S).is_some() {
                return Err(Error::Encoding("description input contains entity markers".into()));
            }
            (None, None)
        }
    };
    Ok(EncodedInput {
        attn_mask: vec![1; ids.len()],
        ids,
        pos_cls,
        pos_mask,
        pos_e1s,
        pos_e2s,
        kind,
    })
}

pub fn encode_instance(inst: &RelationInstance, vocab: &Vocab, max_len: usize) -> Result<EncodedInput> {
    tokenize_encode(&render_instance_template(inst)?, vocab, max_len, InputKind::Instance)
}

pub fn encode_description(desc: &RelationDescription, vocab: &Vocab, max_len: usize) -> Result<EncodedInput> {
    tokenize_encode(&render_description_template(desc), vocab, max_len, InputKind::Description)
}

/// Right-padded batch of encoded inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub width: usize,
    /// `ids[b]` has exactly `width` entries.
    pub ids: Vec<Vec<usize>>,
    pub attn_mask: Vec<Vec<u8>>,
    pub inputs: Vec<EncodedInput>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn pad_batch(inputs: &[EncodedInput], pad_id: usize) -> Result<Batch> {
    let width = inputs
        .iter()
        .map(EncodedInput::len)
        .max()
        .ok_or_else(|| Error::Contract("cannot pad an empty batch".into()))?;
    let mut ids = Vec::with_capacity(inputs.len());
    let mut attn_mask = Vec::with_capacity(inputs.len());
    for inp in inputs {
        let mut row = inp.ids.clone();
        row.resize(width, pad_id);
        let mut mask = inp.attn_mask.clone();
        mask.resize(width, 0);
        ids.push(row);
        attn_mask.push(mask);
    }
    Ok(Batch {
        width,
        ids,
        attn_mask,
        inputs: inputs.to_vec(),
    })
}
