//! Precomputed text embeddings, `{"dim": D, "concepts": {name: [floats]}}`.

use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::norm;

/// Unit-normalized concept directions in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbeddingSet {
    dim: usize,
    entries: Vec<(String, Vec<f32>)>,
}

impl ConceptEmbeddingSet {
    /// Normalizes every vector; rejects duplicates, zero vectors and width
    /// mismatches.
    pub fn new(dim: usize, entries: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let mut out = Vec::with_capacity(entries.len());
        for (name, v) in entries {
            if out.iter().any(|(n, _): &(String, Vec<f32>)| *n == name) {
                return Err(Error::Invalid(format!("duplicate concept `{name}`")));
            }
            if v.len() != dim {
                return Err(Error::Shape(format!(
                    "concept `{name}` has {} values, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("concept `{name}`")));
            }
            let n = norm(&v);
            if n == 0.0 {
                return Err(Error::Invalid(format!("concept `{name}` is the zero vector")));
            }
            out.push((name, v.iter().map(|&x| (x as f64 / n) as f32).collect()));
        }
        Ok(Self { dim, entries: out })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v.as_slice()))
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// Keeps object keys in order and surfaces duplicates instead of letting
/// the last one win.
struct OrderedEntries(Vec<(String, Vec<f32>)>);

impl<'de> Deserialize<'de> for OrderedEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedEntries;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of concept name to float array")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut out: Vec<(String, Vec<f32>)> = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Vec<f32>>()? {
                    if out.iter().any(|(n, _)| *n == k) {
                        return Err(de::Error::custom(format!("duplicate concept `{k}`")));
                    }
                    out.push((k, v));
                }
                Ok(OrderedEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptFile {
    dim: usize,
    concepts: OrderedEntries,
}

pub fn parse_concept_embeddings(text: &str, expected_dim: Option<usize>) -> Result<ConceptEmbeddingSet> {
    let file: ConceptFile =
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("concept embeddings: {e}")))?;
    if let Some(d) = expected_dim {
        if file.dim != d {
            return Err(Error::Shape(format!(
                "concept embeddings have dim {}, model embeds into {d}",
                file.dim
            )));
        }
    }
    ConceptEmbeddingSet::new(file.dim, file.concepts.0)
}

/// Loads and renormalizes concept embeddings; `expected_dim` is the model's
/// `d_embed` when known.
pub fn load_concept_embeddings(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
) -> Result<ConceptEmbeddingSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_concept_embeddings(&text, expected_dim)
}

pub fn concept_embeddings_json(set: &ConceptEmbeddingSet) -> String {
    let concepts: serde_json::Map<String, serde_json::Value> = set
        .iter()
        .map(|(n, v)| (n.to_string(), serde_json::json!(v)))
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({"dim": set.dim(), "concepts": concepts}))
        .expect("embeddings serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalizes() {
        let s = parse_concept_embeddings(r#"{"dim":3,"concepts":{"a":[2,0,0]}}"#, Some(3)).unwrap();
        assert_eq!(s.get("a").unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn duplicate_rejected() {
        let r = parse_concept_embeddings(r#"{"dim":1,"concepts":{"a":[1],"a":[2]}}"#, None);
        assert!(r.unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn dim_mismatch_rejected() {
        assert!(parse_concept_embeddings(r#"{"dim":2,"concepts":{"a":[1,0]}}"#, Some(3)).is_err());
        assert!(parse_concept_embeddings(r#"{"dim":2,"concepts":{"a":[1,0,0]}}"#, None).is_err());
    }

    #[test]
    fn random_vectors_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let entries: Vec<_> = (0..5)
            .map(|i| {
                let v: Vec<f32> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
                (format!("c{i}"), v)
            })
            .collect();
        let set = ConceptEmbeddingSet::new(12, entries).unwrap();
        let text = concept_embeddings_json(&set);
        let back = parse_concept_embeddings(&text, Some(12)).unwrap();
        for (_, v) in back.iter() {
            assert!((norm(v) - 1.0).abs() < 1e-5);
        }
        assert_eq!(back.names().collect::<Vec<_>>(), ["c0", "c1", "c2", "c3", "c4"]);
    }
}
