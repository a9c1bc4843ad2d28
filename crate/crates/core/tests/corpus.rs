mod common;

use std::collections::BTreeSet;

use gpgnn::corpus::synth::{synthesize_multihop_corpus, SynthSpec};
use gpgnn::corpus::{parse_corpus_str, sentence_to_json, EntityMention, RelationTriple, Sentence};
use proptest::prelude::*;

#[test]
fn preprocessing_properties_hold_on_random_sentences() {
    let stats = common::check_preprocessing_properties(1000, 3).unwrap();
    // The generator must exercise both outcomes and both partitions.
    assert!(stats.kept > 300 && stats.skipped > 50, "{stats:?}");
    assert!(stats.dense > 20 && stats.dense < stats.kept, "{stats:?}");
}

fn sentence_strategy() -> impl Strategy<Value = Sentence> {
    (
        2usize..12,
        prop::collection::vec("[a-zA-Z0-9'\"\\\\é,.-]{1,6}", 12),
    )
        .prop_flat_map(|(len, words)| {
            let tokens: Vec<String> = words[..len].to_vec();
            let entities =
                prop::collection::vec((0..len, prop::option::of("[A-Z][0-9]{1,3}")), 2..4)
                    .prop_map(move |es| {
                        es.into_iter()
                            .map(|(start, kb)| EntityMention {
                                start,
                                end: start + 1,
                                kb_id: kb,
                            })
                            .collect::<Vec<_>>()
                    });
            (
                Just(tokens),
                entities,
                prop::collection::vec((0usize..2, 0usize..2, "[a-z_]{1,8}"), 0..4),
            )
                .prop_map(|(tokens, entities, triples)| Sentence {
                    id: "p".into(),
                    tokens,
                    entities,
                    triples: triples
                        .into_iter()
                        .map(|(s, o, r)| RelationTriple::gold(s, o, r))
                        .collect(),
                })
        })
}

proptest! {
    #[test]
    fn serialisation_round_trips(s in sentence_strategy()) {
        let text = format!("{}\n", sentence_to_json(&s));
        let parsed = parse_corpus_str(&text);
        prop_assert!(parsed.errors.is_empty(), "{:?}", parsed.errors);
        prop_assert_eq!(parsed.sentences, vec![s]);
    }
}

/// Reads the premises back from the surface text: each segment is
/// `n<ord> SYMBOL [relation n<ord>]`.
fn premises_from_text(s: &Sentence) -> Vec<(usize, usize, String)> {
    let ord_of_entity: Vec<String> = s
        .entities
        .iter()
        .map(|e| s.tokens[e.start - 1].clone())
        .collect();
    let entity_of = |ord: &str| ord_of_entity.iter().position(|o| o == ord).unwrap();
    let mut out = Vec::new();
    for (k, e) in s.entities.iter().enumerate() {
        let next = &s.tokens[e.end];
        if next != ";" && next != "." {
            out.push((k, entity_of(&s.tokens[e.end + 1]), next.clone()));
        }
    }
    out
}

#[test]
fn synthetic_labels_are_exactly_premises_plus_two_step_implications() {
    let spec = SynthSpec {
        n_sentences: 200,
        ..SynthSpec::default()
    };
    let corpus = synthesize_multihop_corpus(&spec).unwrap();
    let rule = |a: &str, b: &str| {
        spec.rules
            .iter()
            .find(|r| r.first == a && r.second == b)
            .map(|r| r.implied.clone())
    };
    let mut implied_total = 0;
    for s in corpus.train.iter().chain(&corpus.valid).chain(&corpus.test) {
        let premises = premises_from_text(s);
        let mut want: BTreeSet<(usize, usize, String)> = premises.iter().cloned().collect();
        for (a, b, r1) in &premises {
            for (c, d, r2) in &premises {
                if b == c && a != d {
                    if let Some(r) = rule(r1, r2) {
                        want.insert((*a, *d, r));
                        implied_total += 1;
                    }
                }
            }
        }
        let got: BTreeSet<(usize, usize, String)> = s
            .triples
            .iter()
            .filter(|t| !t.is_na())
            .map(|t| (t.subject, t.object, t.relation.clone()))
            .collect();
        assert_eq!(got, want, "sentence {}", s.id);
        let m = s.entities.len();
        assert_eq!(s.triples.len(), m * (m - 1));
    }
    assert!(implied_total > 200);
}
