use std::collections::BTreeSet;

use super::Sentence;

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// True when the undirected graph over non-`NA` triples has a cycle. A
/// labelled pair in both directions counts as one undirected edge, so any
/// cycle found has at least three entities.
pub fn has_relation_cycle(s: &Sentence) -> bool {
    let edges: BTreeSet<(usize, usize)> = s
        .triples
        .iter()
        .filter(|t| !t.is_na() && t.subject != t.object)
        .map(|t| (t.subject.min(t.object), t.subject.max(t.object)))
        .collect();
    let n = s
        .entities
        .len()
        .max(edges.iter().map(|&(_, b)| b + 1).max().unwrap_or(0));
    let mut parent: Vec<usize> = (0..n).collect();
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra == rb {
            return true;
        }
        parent[ra] = rb;
    }
    false
}

pub fn is_dense(s: &Sentence) -> bool {
    s.entities.len() > 2 && has_relation_cycle(s)
}

/// Partitions sentences into `(dense, rest)`, preserving order.
pub fn split_dense_subset(sentences: Vec<Sentence>) -> (Vec<Sentence>, Vec<Sentence>) {
    sentences.into_iter().partition(is_dense)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EntityMention, RelationTriple};

    fn graph(m: usize, edges: &[(usize, usize, &str)]) -> Sentence {
        Sentence {
            id: "g".into(),
            tokens: (0..m).map(|i| format!("w{i}")).collect(),
            entities: (0..m).map(|i| EntityMention::new(i, i + 1)).collect(),
            triples: edges
                .iter()
                .map(|&(a, b, r)| RelationTriple::gold(a, b, r))
                .collect(),
        }
    }

    #[test]
    fn triangle_is_dense() {
        assert!(is_dense(&graph(
            3,
            &[(0, 1, "p"), (1, 2, "p"), (2, 0, "q")]
        )));
    }

    #[test]
    fn chain_is_not_dense() {
        assert!(!is_dense(&graph(
            3,
            &[(0, 1, "p"), (1, 2, "p"), (1, 0, "q"), (0, 2, "NA")]
        )));
    }

    #[test]
    fn two_entities_are_never_dense() {
        assert!(!is_dense(&graph(2, &[(0, 1, "p"), (1, 0, "q")])));
    }

    #[test]
    fn na_edges_do_not_close_cycles() {
        assert!(!is_dense(&graph(
            3,
            &[(0, 1, "p"), (1, 2, "p"), (2, 0, "NA")]
        )));
    }

    #[test]
    fn split_is_a_partition() {
        let items = vec![
            graph(3, &[(0, 1, "p"), (1, 2, "p"), (0, 2, "p")]),
            graph(2, &[(0, 1, "p")]),
            graph(4, &[(0, 1, "p"), (1, 2, "p"), (2, 3, "p"), (3, 0, "p")]),
        ];
        let (dense, rest) = split_dense_subset(items);
        assert_eq!(dense.len(), 2);
        assert_eq!(rest.len(), 1);
    }
}
