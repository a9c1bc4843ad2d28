use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Name of the reserved "no relation" class, always index 0.
pub const NA: &str = "NA";

/// Relation names with their class indices and an optional inverse map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationVocab {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    inverse: BTreeMap<String, String>,
}

impl RelationVocab {
    /// `names[0]` must be `NA`; names must be unique.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.first().map(String::as_str) != Some(NA) {
            return Err(Error::Config(format!(
                "relation vocabulary must start with `{NA}`"
            )));
        }
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("relation `{n}` listed twice")));
            }
        }
        Ok(Self {
            names,
            index,
            inverse: BTreeMap::new(),
        })
    }

    /// Installs an inverse map. Missing mirror entries are filled in, so the
    /// map is involutive; `NA` may not take part.
    pub fn with_inverses(mut self, pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut inverse = BTreeMap::new();
        for (a, b) in pairs {
            for name in [a, b] {
                if name == NA {
                    return Err(Error::Config(format!("`{NA}` cannot have an inverse")));
                }
                if !self.index.contains_key(name) {
                    return Err(Error::UnknownRelation(name.clone()));
                }
            }
            for (from, to) in [(a, b), (b, a)] {
                match inverse.get(from) {
                    Some(existing) if existing != to => {
                        return Err(Error::Config(format!(
                            "relation `{from}` has conflicting inverses `{existing}` and `{to}`"
                        )));
                    }
                    _ => {
                        inverse.insert(from.clone(), to.clone());
                    }
                }
            }
        }
        self.inverse = inverse;
        Ok(self)
    }

    pub fn load(relations: &Path, inverses: Option<&Path>) -> Result<Self> {
        let text = fs::read_to_string(relations).map_err(|e| Error::file(relations, e))?;
        let names: Vec<String> = serde_json::from_str(&text)?;
        let vocab = Self::new(names)?;
        match inverses {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
                let pairs: BTreeMap<String, String> = serde_json::from_str(&text)?;
                vocab.with_inverses(&pairs)
            }
            None => Ok(vocab),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index(name)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn inverse(&self, name: &str) -> Option<&str> {
        self.inverse.get(name).map(String::as_str)
    }

    pub fn inverse_map(&self) -> &BTreeMap<String, String> {
        &self.inverse
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn na_must_come_first() {
        assert!(RelationVocab::new(names(&["part of", "NA"])).is_err());
        assert!(RelationVocab::new(names(&["NA", "a", "a"])).is_err());
        let v = RelationVocab::new(names(&["NA", "part of"])).unwrap();
        assert_eq!(v.index(NA), Some(0));
        assert_eq!(v.name(1), "part of");
    }

    #[test]
    fn inverses_are_completed_and_involutive() {
        let v = RelationVocab::new(names(&["NA", "part of", "has a member", "p"]))
            .unwrap()
            .with_inverses(&BTreeMap::from([(
                "part of".to_string(),
                "has a member".to_string(),
            )]))
            .unwrap();
        assert_eq!(v.inverse("part of"), Some("has a member"));
        assert_eq!(v.inverse("has a member"), Some("part of"));
        assert_eq!(v.inverse("p"), None);
        assert_eq!(v.inverse(NA), None);
        for (a, b) in v.inverse_map() {
            assert_eq!(v.inverse(b), Some(a.as_str()));
        }
    }

    #[test]
    fn invalid_inverse_maps_are_rejected() {
        let base = RelationVocab::new(names(&["NA", "a", "b", "c"])).unwrap();
        let na = BTreeMap::from([("NA".to_string(), "a".to_string())]);
        assert!(base.clone().with_inverses(&na).is_err());
        let unknown = BTreeMap::from([("a".to_string(), "z".to_string())]);
        assert!(matches!(
            base.clone().with_inverses(&unknown),
            Err(Error::UnknownRelation(_))
        ));
        let conflict = BTreeMap::from([
            ("a".to_string(), "b".to_string()),
            ("b".to_string(), "c".to_string()),
        ]);
        assert!(base.with_inverses(&conflict).is_err());
    }
}
