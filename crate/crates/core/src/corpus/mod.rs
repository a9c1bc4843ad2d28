//! Sentence data model, corpus I/O and the normalisation pipeline.

mod dense;
mod embeddings;
mod normalize;
mod parse;
pub mod synth;
mod vocab;

pub use dense::{has_relation_cycle, is_dense, split_dense_subset};
pub use embeddings::{load_embedding_file, PretrainedEmbeddings, EMBEDDING_DIM};
pub use normalize::{
    normalize_corpus, normalize_sentence, NormalizationReport, Normalized, SkipReason, MAX_ENTITIES,
};
pub use parse::{
    parse_corpus_file, parse_corpus_str, sentence_to_json, write_corpus_file, LineError,
    ParsedCorpus,
};
pub use vocab::{Vocabulary, PAD_TOKEN, UNK_TOKEN};

use serde::{Deserialize, Serialize};

use crate::model::NA;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    /// First token of the mention.
    pub start: usize,
    /// One past the last token.
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kb_id: Option<String>,
}

impl EntityMention {
    pub fn new(start: usize, end: usize) -> Self {
        Self {
            start,
            end,
            kb_id: None,
        }
    }

    pub fn with_kb_id(mut self, kb_id: impl Into<String>) -> Self {
        self.kb_id = Some(kb_id.into());
        self
    }

    pub fn contains(&self, token: usize) -> bool {
        (self.start..self.end).contains(&token)
    }

    pub fn same_span(&self, other: &EntityMention) -> bool {
        self.start == other.start && self.end == other.end
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    #[default]
    Gold,
    Reversed,
    NaFilled,
}

impl Provenance {
    fn is_gold(&self) -> bool {
        *self == Provenance::Gold
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTriple {
    #[serde(rename = "s")]
    pub subject: usize,
    #[serde(rename = "o")]
    pub object: usize,
    #[serde(rename = "r")]
    pub relation: String,
    #[serde(default, skip_serializing_if = "Provenance::is_gold")]
    pub provenance: Provenance,
}

impl RelationTriple {
    pub fn gold(subject: usize, object: usize, relation: impl Into<String>) -> Self {
        Self {
            subject,
            object,
            relation: relation.into(),
            provenance: Provenance::Gold,
        }
    }

    pub fn is_na(&self) -> bool {
        self.relation == NA
    }
}

/// A pre-tokenised sentence with entity mentions and relation labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub entities: Vec<EntityMention>,
    #[serde(default)]
    pub triples: Vec<RelationTriple>,
}

impl Sentence {
    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    /// Label of the ordered pair, if any.
    pub fn relation(&self, subject: usize, object: usize) -> Option<&str> {
        self.triples
            .iter()
            .find(|t| t.subject == subject && t.object == object)
            .map(|t| t.relation.as_str())
    }
}
