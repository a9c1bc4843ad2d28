use crate::corpus::{Sentence, Vocabulary};
use crate::error::{Error, Result};

use super::RelationVocab;

/// Position marker for tokens outside both entities of an edge.
pub const MARK_NONE: usize = 0;
/// Position marker for tokens of the edge's first entity.
pub const MARK_FIRST: usize = 1;
/// Position marker for tokens of the edge's second entity.
pub const MARK_SECOND: usize = 2;

/// Fully connected directed graph over a sentence's entities.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EntityGraph {
    pub m: usize,
    /// Ordered pairs `(i, j)`, `i != j`, in lexicographic order.
    pub edges: Vec<(usize, usize)>,
}

impl EntityGraph {
    pub fn new(m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::Data(format!(
                "entity graph needs at least 2 entities, got {m}"
            )));
        }
        let edges = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        Ok(Self { m, edges })
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Position of `(i, j)` in [`EntityGraph::edges`].
    pub fn edge_index(&self, i: usize, j: usize) -> usize {
        debug_assert!(i != j && i < self.m && j < self.m);
        i * (self.m - 1) + if j > i { j - 1 } else { j }
    }
}

pub fn build_entity_graph(sentence: &Sentence) -> Result<EntityGraph> {
    EntityGraph::new(sentence.entities.len())
}

/// Marker sequence of edge `(i, j)`: 1 inside entity `i`, 2 inside entity
/// `j`, 0 elsewhere.
pub fn edge_markers(sentence: &Sentence, i: usize, j: usize) -> Result<Vec<usize>> {
    let (a, b) = (&sentence.entities[i], &sentence.entities[j]);
    if a.overlaps(b) {
        return Err(Error::Data(format!(
            "sentence `{}`: entities {i} and {j} overlap",
            sentence.id
        )));
    }
    let mut markers = vec![MARK_NONE; sentence.tokens.len()];
    markers[a.start..a.end].fill(MARK_FIRST);
    markers[b.start..b.end].fill(MARK_SECOND);
    Ok(markers)
}

/// A sentence turned into indices: token rows, per-edge markers and
/// per-edge gold classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub id: String,
    pub tokens: Vec<usize>,
    pub graph: EntityGraph,
    /// `markers[e][t]` for edge `e` of the graph.
    pub markers: Vec<Vec<usize>>,
    /// Gold class per edge, when labelled.
    pub labels: Vec<Option<usize>>,
    /// Knowledge-base id per entity, when known.
    pub kb_ids: Vec<Option<String>>,
}

impl EncodedSentence {
    pub fn new(sentence: &Sentence, vocab: &Vocabulary, relations: &RelationVocab) -> Result<Self> {
        let graph = build_entity_graph(sentence)?;
        for e in &sentence.entities {
            if e.start >= e.end || e.end > sentence.tokens.len() {
                return Err(Error::Data(format!(
                    "sentence `{}`: entity span [{}, {}) is invalid",
                    sentence.id, e.start, e.end
                )));
            }
        }
        let markers = graph
            .edges
            .iter()
            .map(|&(i, j)| edge_markers(sentence, i, j))
            .collect::<Result<Vec<_>>>()?;
        let mut labels = vec![None; graph.edge_count()];
        for t in &sentence.triples {
            if t.subject == t.object || t.subject >= graph.m || t.object >= graph.m {
                continue;
            }
            let class = relations.index(&t.relation).ok_or_else(|| {
                Error::Data(format!(
                    "sentence `{}`: relation `{}` is not in the vocabulary",
                    sentence.id, t.relation
                ))
            })?;
            labels[graph.edge_index(t.subject, t.object)] = Some(class);
        }
        Ok(Self {
            id: sentence.id.clone(),
            tokens: vocab.encode(&sentence.tokens),
            graph,
            markers,
            labels,
            kb_ids: sentence.entities.iter().map(|e| e.kb_id.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold classes for every edge; errors when any pair is unlabelled.
    pub fn complete_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .zip(&self.graph.edges)
            .map(|(l, &(i, j))| {
                l.ok_or_else(|| {
                    Error::Data(format!(
                        "sentence `{}`: pair ({i}, {j}) has no gold label",
                        self.id
                    ))
                })
            })
            .collect()
    }
}
