//! Synthetic multi-hop corpus.
//!
//! Every sentence describes one or two directed chains of entities. Each
//! entity appears once as a mention, preceded by a per-sentence ordinal
//! token; an entity with an outgoing premise edge is followed by the relation
//! token and the ordinal of its target:
//!
//! ```text
//! n2 e17 p1 n3 ; n3 e4 ; n1 e9 p0 n2 .
//! ```
//!
//! Segments are shuffled, so a premise edge can be read off the text once its
//! two endpoints are marked, while an implied relation between the ends of a
//! chain needs the intermediate entity to be resolved. Test sentences use a
//! disjoint pool of entity symbols.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{normalize_corpus, write_corpus_file, EntityMention, RelationTriple, Sentence};
use crate::error::{Error, Result};
use crate::model::{RelationVocab, NA};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionRule {
    pub first: String,
    pub second: String,
    pub implied: String,
}

impl CompositionRule {
    pub fn new(first: &str, second: &str, implied: &str) -> Self {
        Self {
            first: first.into(),
            second: second.into(),
            implied: implied.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Size of the entity symbol pool for train/validation; the test pool is
    /// disjoint and of the same size.
    pub n_entities: usize,
    /// Number of premise relations, named `p0`, `p1`, ...
    pub n_relations: usize,
    pub rules: Vec<CompositionRule>,
    /// Training sentences.
    pub n_sentences: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub min_entities: usize,
    pub max_entities: usize,
    /// Probability that a sentence holds two chains instead of one.
    pub split_probability: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_entities: 200,
            n_relations: 3,
            rules: vec![
                CompositionRule::new("p0", "p1", "c01"),
                CompositionRule::new("p1", "p2", "c12"),
                CompositionRule::new("p2", "p0", "c20"),
            ],
            n_sentences: 50,
            n_valid: 20,
            n_test: 50,
            min_entities: 3,
            max_entities: 5,
            split_probability: 0.5,
            seed: 7,
        }
    }
}

pub fn premise_name(k: usize) -> String {
    format!("p{k}")
}

fn ordinal_token(k: usize) -> String {
    format!("n{k}")
}

const SEPARATOR: &str = ";";
const TERMINATOR: &str = ".";

/// Compiled rule table keyed by premise pair.
#[derive(Clone, Debug)]
pub struct RuleTable {
    table: BTreeMap<(String, String), String>,
}

impl RuleTable {
    pub fn new(rules: &[CompositionRule]) -> Result<Self> {
        let mut table = BTreeMap::new();
        for r in rules {
            let key = (r.first.clone(), r.second.clone());
            if let Some(existing) = table.get(&key) {
                if existing != &r.implied {
                    return Err(Error::Config(format!(
                        "rule `{} ∘ {}` maps to both `{existing}` and `{}`",
                        r.first, r.second, r.implied
                    )));
                }
            }
            table.insert(key, r.implied.clone());
        }
        Ok(Self { table })
    }

    pub fn implied(&self, first: &str, second: &str) -> Option<&str> {
        self.table
            .get(&(first.to_string(), second.to_string()))
            .map(String::as_str)
    }

    fn continuations(&self, first: &str) -> Vec<&str> {
        self.table
            .keys()
            .filter(|(a, _)| a == first)
            .map(|(_, b)| b.as_str())
            .collect()
    }
}

/// Implied triples for every directed two-step path through `premises`.
pub fn apply_rules(premises: &[RelationTriple], rules: &RuleTable) -> Vec<RelationTriple> {
    let mut out = Vec::new();
    for a in premises {
        for b in premises {
            if a.object == b.subject && a.subject != b.object {
                if let Some(r) = rules.implied(&a.relation, &b.relation) {
                    out.push(RelationTriple::gold(a.subject, b.object, r));
                }
            }
        }
    }
    out
}

/// Train/validation/test splits plus the relation inventory.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<Sentence>,
    pub valid: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub relations: RelationVocab,
    pub implied: Vec<String>,
}

impl SynthCorpus {
    /// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and
    /// `relations.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        write_corpus_file(&dir.join("train.jsonl"), &self.train)?;
        write_corpus_file(&dir.join("valid.jsonl"), &self.valid)?;
        write_corpus_file(&dir.join("test.jsonl"), &self.test)?;
        let rel = dir.join("relations.json");
        fs::write(&rel, serde_json::to_string(self.relations.names())?)
            .map_err(|e| Error::file(&rel, e))?;
        Ok(())
    }
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    rules: &'a RuleTable,
    premises: Vec<String>,
    starters: Vec<String>,
}

impl Generator<'_> {
    /// Relations along a chain of `len` entities; may come back shorter when
    /// no rule continues the last relation.
    fn chain(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
        let mut rels: Vec<String> = Vec::new();
        while rels.len() + 1 < len {
            let next = match rels.last() {
                None => self.starters.choose(rng).unwrap().clone(),
                Some(prev) => match self.rules.continuations(prev).choose(rng) {
                    Some(r) => r.to_string(),
                    None => break,
                },
            };
            rels.push(next);
        }
        rels
    }

    fn sentence(&self, id: String, pool: &str, rng: &mut ChaCha8Rng) -> Sentence {
        let spec = self.spec;
        let m = rng.gen_range(spec.min_entities..=spec.max_entities);

        // Chain lengths: the first chain always allows a two-step path.
        let mut lengths = vec![m];
        if m >= 4 && rng.gen_bool(spec.split_probability) {
            let first = rng.gen_range(3..m);
            lengths = vec![first, m - first];
        }
        let mut edges: Vec<(usize, usize, String)> = Vec::new();
        let mut next = 0;
        for len in lengths {
            let rels = self.chain(len, rng);
            for (k, r) in rels.iter().enumerate() {
                edges.push((next + k, next + k + 1, r.clone()));
            }
            next += rels.len() + 1;
        }
        let m = next;

        // Node k gets a shuffled ordinal and a distinct symbol.
        let mut ordinals: Vec<usize> = (1..=m).collect();
        ordinals.shuffle(rng);
        let symbols: Vec<usize> = rand::seq::index::sample(rng, spec.n_entities, m)
            .into_iter()
            .collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(rng);

        let mut tokens = Vec::new();
        let mut spans = vec![0; m];
        for (pos, &node) in order.iter().enumerate() {
            if pos > 0 {
                tokens.push(SEPARATOR.to_string());
            }
            tokens.push(ordinal_token(ordinals[node]));
            spans[node] = tokens.len();
            tokens.push(format!("{pool}{}", symbols[node]));
            if let Some((_, target, r)) = edges.iter().find(|e| e.0 == node) {
                tokens.push(r.clone());
                tokens.push(ordinal_token(ordinals[*target]));
            }
        }
        tokens.push(TERMINATOR.to_string());

        let entities = (0..m)
            .map(|k| {
                EntityMention::new(spans[k], spans[k] + 1)
                    .with_kb_id(format!("{pool}{}", symbols[k]))
            })
            .collect();
        let premises: Vec<RelationTriple> = edges
            .iter()
            .map(|(a, b, r)| RelationTriple::gold(*a, *b, r.clone()))
            .collect();
        let mut triples = apply_rules(&premises, self.rules);
        triples.extend(premises);
        Sentence {
            id,
            tokens,
            entities,
            triples,
        }
    }
}

pub fn synthesize_multihop_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.n_relations == 0 {
        return Err(Error::Config("n_relations must be positive".into()));
    }
    if spec.min_entities < 3 || spec.max_entities < spec.min_entities || spec.max_entities > 9 {
        return Err(Error::Config(format!(
            "entities per sentence must satisfy 3 <= min <= max <= 9, got {}..{}",
            spec.min_entities, spec.max_entities
        )));
    }
    if spec.n_entities < spec.max_entities {
        return Err(Error::Config(format!(
            "entity pool of {} is smaller than {} entities per sentence",
            spec.n_entities, spec.max_entities
        )));
    }
    if !(0.0..=1.0).contains(&spec.split_probability) {
        return Err(Error::Config("split_probability must lie in [0, 1]".into()));
    }
    let premises: Vec<String> = (0..spec.n_relations).map(premise_name).collect();
    for r in &spec.rules {
        for name in [&r.first, &r.second] {
            if !premises.contains(name) {
                return Err(Error::Config(format!("rule uses unknown premise `{name}`")));
            }
        }
        if r.implied == NA {
            return Err(Error::Config(format!("rule may not imply `{NA}`")));
        }
    }
    let rules = RuleTable::new(&spec.rules)?;
    let starters: Vec<String> = premises
        .iter()
        .filter(|p| !rules.continuations(p).is_empty())
        .cloned()
        .collect();
    if starters.is_empty() {
        return Err(Error::Config(
            "at least one composition rule is required".into(),
        ));
    }

    let mut names = vec![NA.to_string()];
    names.extend(premises.iter().cloned());
    let mut implied = Vec::new();
    for r in &spec.rules {
        if !names.contains(&r.implied) {
            names.push(r.implied.clone());
            implied.push(r.implied.clone());
        }
    }
    let relations = RelationVocab::new(names)?;

    let generator = Generator {
        spec,
        rules: &rules,
        premises,
        starters,
    };
    debug_assert!(!generator.premises.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |name: &str, n: usize, pool: &str| -> Result<Vec<Sentence>> {
        let raw: Vec<Sentence> = (0..n)
            .map(|i| generator.sentence(format!("{name}-{i}"), pool, &mut rng))
            .collect();
        let (kept, report) = normalize_corpus(&raw, &relations)?;
        debug_assert_eq!(report.skipped_total(), 0);
        Ok(kept)
    };
    let train = split("train", spec.n_sentences, "e")?;
    let valid = split("valid", spec.n_valid, "e")?;
    let test = split("test", spec.n_test, "u")?;
    Ok(SynthCorpus {
        train,
        valid,
        test,
        relations,
        implied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grandparent_rule() {
        let rules = RuleTable::new(&[CompositionRule::new(
            "parent_of",
            "parent_of",
            "grandparent_of",
        )])
        .unwrap();
        let premises = vec![
            RelationTriple::gold(0, 1, "parent_of"),
            RelationTriple::gold(1, 2, "parent_of"),
        ];
        assert_eq!(
            apply_rules(&premises, &rules),
            vec![RelationTriple::gold(0, 2, "grandparent_of")]
        );
    }

    #[test]
    fn inconsistent_rules_are_rejected() {
        let rules = [
            CompositionRule::new("p0", "p1", "a"),
            CompositionRule::new("p0", "p1", "b"),
        ];
        assert!(RuleTable::new(&rules).is_err());
        let spec = SynthSpec {
            rules: rules.to_vec(),
            ..Default::default()
        };
        assert!(synthesize_multihop_corpus(&spec).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_complete() {
        let spec = SynthSpec::default();
        let a = synthesize_multihop_corpus(&spec).unwrap();
        let b = synthesize_multihop_corpus(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len(), spec.n_sentences);
        for s in a.train.iter().chain(&a.valid).chain(&a.test) {
            let m = s.entities.len();
            assert!((3..=9).contains(&m));
            assert_eq!(s.triples.len(), m * (m - 1));
        }
    }

    #[test]
    fn test_symbols_are_disjoint_from_training() {
        let c = synthesize_multihop_corpus(&SynthSpec::default()).unwrap();
        let train: std::collections::BTreeSet<_> = c
            .train
            .iter()
            .flat_map(|s| s.tokens.iter().cloned())
            .collect();
        for s in &c.test {
            for e in &s.entities {
                assert!(!train.contains(&s.tokens[e.start]));
            }
        }
    }
}
