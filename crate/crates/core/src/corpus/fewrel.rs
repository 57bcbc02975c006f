use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{DatasetSplit, Descriptions, RelationDescription, RelationInstance, Span, SplitRole};
use crate::error::{Error, Result};

/// Reads a FewRel-format file: `{relation_id: [{tokens, h, t}, ...]}` where
/// `h`/`t` are `[name, entity_id, [[token indices], ...]]`.
pub fn load_fewrel_json(path: impl AsRef<Path>, role: SplitRole) -> Result<DatasetSplit> {
    let text = fs::read_to_string(path)?;
    parse_fewrel(&text, role)
}

pub fn parse_fewrel(text: &str, role: SplitRole) -> Result<DatasetSplit> {
    let root: Value = serde_json::from_str(text)?;
    let map = root.as_object().ok_or_else(|| Error::Parse {
        relation: "<root>".into(),
        index: 0,
        message: "expected an object mapping relation id to instances".into(),
    })?;
    let mut split = DatasetSplit::new(role);
    for (rel, list) in map {
        let items = list.as_array().ok_or_else(|| Error::Parse {
            relation: rel.clone(),
            index: 0,
            message: "expected a list of instances".into(),
        })?;
        let mut insts = Vec::with_capacity(items.len());
        for (index, item) in items.iter().enumerate() {
            let fail = |message: String| Error::Parse {
                relation: rel.clone(),
                index,
                message,
            };
            let tokens = item
                .get("tokens")
                .and_then(Value::as_array)
                .ok_or_else(|| fail("missing `tokens` list".into()))?
                .iter()
                .map(|t| t.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| fail("non-string token".into()))?;
            let head_span = mention_span(item.get("h")).map_err(|m| fail(format!("h: {m}")))?;
            let tail_span = mention_span(item.get("t")).map_err(|m| fail(format!("t: {m}")))?;
            let inst = RelationInstance {
                tokens,
                head_span,
                tail_span,
                relation_id: rel.clone(),
            };
            inst.validate().map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("{m} (instance {index})")),
                other => other,
            })?;
            insts.push(inst);
        }
        split.relations.insert(rel.clone(), insts);
    }
    Ok(split)
}

/// First mention's indices, normalized to one contiguous inclusive span.
fn mention_span(v: Option<&Value>) -> std::result::Result<Span, String> {
    let arr = v.and_then(Value::as_array).ok_or("missing mention entry")?;
    let mentions = arr
        .get(2)
        .and_then(Value::as_array)
        .ok_or("missing mention index lists")?;
    let first = mentions
        .first()
        .and_then(Value::as_array)
        .ok_or("empty mention index lists")?;
    let idx = first
        .iter()
        .map(|x| x.as_u64().map(|u| u as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or("non-integer token index")?;
    match (idx.iter().min(), idx.iter().max()) {
        (Some(&s), Some(&e)) => Ok((s, e)),
        _ => Err("mention without token indices".into()),
    }
}

/// Serializes a split back to FewRel format. Entity names are the span's
/// surface tokens; entity ids are left empty.
pub fn to_fewrel_value(split: &DatasetSplit) -> Value {
    let mut root = Map::new();
    for (rel, insts) in &split.relations {
        let items: Vec<Value> = insts
            .iter()
            .map(|inst| {
                let mention = |(s, e): Span| {
                    json!([inst.tokens[s..=e].join(" "), "", [(s..=e).collect::<Vec<_>>()]])
                };
                json!({
                    "tokens": inst.tokens,
                    "h": mention(inst.head_span),
                    "t": mention(inst.tail_span),
                })
            })
            .collect();
        root.insert(rel.clone(), Value::Array(items));
    }
    Value::Object(root)
}

pub fn save_fewrel_json(split: &DatasetSplit, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string(&to_fewrel_value(split))?)?;
    Ok(())
}

pub fn save_descriptions_json(descriptions: &Descriptions, path: impl AsRef<Path>) -> Result<()> {
    let map: serde_json::Map<String, Value> = descriptions
        .iter()
        .map(|(id, d)| (id.clone(), serde_json::json!([d.name, d.description_text])))
        .collect();
    fs::write(path, serde_json::to_string_pretty(&Value::Object(map))?)?;
    Ok(())
}

/// Reads `{relation_id: [name, description]}`. An empty file is an empty map.
pub fn load_descriptions_json(path: impl AsRef<Path>) -> Result<Descriptions> {
    let text = fs::read_to_string(path)?;
    parse_descriptions(&text)
}

pub fn parse_descriptions(text: &str) -> Result<Descriptions> {
    if text.trim().is_empty() {
        return Ok(BTreeMap::new());
    }
    // Duplicate keys must be caught before they collapse in a map.
    let entries: Vec<(String, Value)> = parse_object_entries(text)?;
    let mut out = BTreeMap::new();
    for (index, (id, v)) in entries.into_iter().enumerate() {
        let pair = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| Error::Parse {
            relation: id.clone(),
            index,
            message: "expected [name, description]".into(),
        })?;
        let (Some(name), Some(text)) = (pair[0].as_str(), pair[1].as_str()) else {
            return Err(Error::Parse {
                relation: id,
                index,
                message: "name and description must be strings".into(),
            });
        };
        if out.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate description id {id}")));
        }
        out.insert(
            id.clone(),
            RelationDescription {
                relation_id: id,
                name: name.to_string(),
                description_text: text.to_string(),
            },
        );
    }
    Ok(out)
}

/// Top-level object entries in document order, keeping repeated keys.
fn parse_object_entries(text: &str) -> Result<Vec<(String, Value)>> {
    use serde::de::{Deserializer, MapAccess, Visitor};
    use std::fmt;

    struct Entries;
    impl<'de> Visitor<'de> for Entries {
        type Value = Vec<(String, Value)>;
        fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
            f.write_str("an object of relation descriptions")
        }
        fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some((k, v)) = map.next_entry::<String, Value>()? {
                out.push((k, v));
            }
            Ok(out)
        }
    }
    let mut de = serde_json::Deserializer::from_str(text);
    let entries = (&mut de).deserialize_map(Entries)?;
    de.end()?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{
      "P26": [
        {"tokens": ["he", "married", "mary"], "h": ["he", "Q1", [[0]]], "t": ["mary", "Q2", [[2]]]},
        {"tokens": ["anna", "wed", "tom", "smith"], "h": ["anna", "Q3", [[0]]], "t": ["tom smith", "Q4", [[2, 3]]]},
        {"tokens": ["x", "and", "y"], "h": ["x", "Q5", [[0], [2]]], "t": ["y", "Q6", [[2]]]}
      ],
      "P40": [
        {"tokens": ["a", "child", "of", "b"], "h": ["a", "", [[0]]], "t": ["b", "", [[3]]]},
        {"tokens": ["c", "is", "d"], "h": ["c", "", [[0]]], "t": ["d", "", [[2]]]},
        {"tokens": ["e", "f", "g"], "h": ["e f", "", [[0, 1]]], "t": ["g", "", [[2]]]}
      ]
    }"#;

    #[test]
    fn loads_fixture_counts() {
        let split = parse_fewrel(FIXTURE, SplitRole::Train).unwrap();
        assert_eq!(split.num_relations(), 2);
        assert!(split.relations.values().all(|v| v.len() == 3));
        let p26 = &split.relations["P26"];
        assert_eq!(p26[1].tail_span, (2, 3));
    }

    #[test]
    fn multiple_mentions_use_the_first() {
        let split = parse_fewrel(FIXTURE, SplitRole::Train).unwrap();
        // Head has mentions [[0], [2]]; the first is kept.
        assert_eq!(split.relations["P26"][2].head_span, (0, 0));
    }

    #[test]
    fn span_past_end_is_a_validation_error() {
        let bad = r#"{"P1": [{"tokens": ["a", "b"], "h": ["a", "", [[0, 2]]], "t": ["b", "", [[1]]]}]}"#;
        assert!(matches!(parse_fewrel(bad, SplitRole::Train), Err(Error::Validation(_))));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let bad = r#"{"P1": [{"tokens": ["a", "b", "c"], "h": ["a b", "", [[0, 1]]], "t": ["b", "", [[1]]]}]}"#;
        assert!(matches!(parse_fewrel(bad, SplitRole::Train), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_entry_names_relation_and_index() {
        let bad = r#"{"P9": [
            {"tokens": ["a", "b"], "h": ["a", "", [[0]]], "t": ["b", "", [[1]]]},
            {"tokens": ["a", "b"], "h": ["a", "", [[0]]]}
        ]}"#;
        match parse_fewrel(bad, SplitRole::Train) {
            Err(Error::Parse { relation, index, .. }) => {
                assert_eq!(relation, "P9");
                assert_eq!(index, 1);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_preserves_content() {
        let split = parse_fewrel(FIXTURE, SplitRole::Validation).unwrap();
        let text = serde_json::to_string(&to_fewrel_value(&split)).unwrap();
        let again = parse_fewrel(&text, SplitRole::Validation).unwrap();
        assert_eq!(split, again);
    }

    #[test]
    fn descriptions() {
        let d = parse_descriptions(r#"{"P26": ["spouse", "the subject has the object as their spouse"]}"#).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d["P26"].name, "spouse");
        assert!(parse_descriptions("").unwrap().is_empty());
        assert!(parse_descriptions("  \n").unwrap().is_empty());
        let dup = r#"{"P26": ["spouse", "a"], "P26": ["spouse", "b"]}"#;
        assert!(matches!(parse_descriptions(dup), Err(Error::Validation(_))));
    }
}
