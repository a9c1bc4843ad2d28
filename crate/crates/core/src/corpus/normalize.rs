use std::collections::BTreeMap;

use serde::Serialize;

use super::{EntityMention, Provenance, RelationTriple, Sentence};
use crate::error::{Error, Result};
use crate::model::{RelationVocab, NA};

/// Sentences with more entities than this are skipped.
pub const MAX_ENTITIES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    TooFewEntities,
    TooManyEntities,
    OverlappingSpans,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::TooFewEntities => "too-few-entities",
            SkipReason::TooManyEntities => "too-many-entities",
            SkipReason::OverlappingSpans => "overlapping-spans",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Normalized {
    Kept(Sentence),
    Skipped(SkipReason),
}

/// Counters accumulated over a normalisation run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NormalizationReport {
    pub input: usize,
    pub kept: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
    pub merged_mentions: usize,
    pub self_loops_dropped: usize,
    pub conflicting_labels_dropped: usize,
    pub reversed_added: usize,
    pub na_added: usize,
}

impl NormalizationReport {
    pub fn skipped_total(&self) -> usize {
        self.skipped.values().sum()
    }
}

/// Normalises one sentence: merges mentions at identical spans, drops
/// self-loops, adds missing reversed triples and fills every unlabelled
/// ordered pair with `NA`. Output triples are ordered by `(subject, object)`.
pub fn normalize_sentence(s: &Sentence, vocab: &RelationVocab) -> Result<Normalized> {
    let mut report = NormalizationReport::default();
    normalize_counted(s, vocab, &mut report)
}

fn normalize_counted(
    s: &Sentence,
    vocab: &RelationVocab,
    report: &mut NormalizationReport,
) -> Result<Normalized> {
    for t in &s.triples {
        vocab.require(&t.relation)?;
    }

    let mut entities: Vec<EntityMention> = Vec::with_capacity(s.entities.len());
    let mut remap = Vec::with_capacity(s.entities.len());
    for e in &s.entities {
        match entities.iter().position(|k| k.same_span(e)) {
            Some(k) => {
                if entities[k].kb_id.is_none() {
                    entities[k].kb_id = e.kb_id.clone();
                }
                report.merged_mentions += 1;
                remap.push(k);
            }
            None => {
                if entities.iter().any(|k| k.overlaps(e)) {
                    return Ok(Normalized::Skipped(SkipReason::OverlappingSpans));
                }
                remap.push(entities.len());
                entities.push(e.clone());
            }
        }
    }
    let m = entities.len();
    if m < 2 {
        return Ok(Normalized::Skipped(SkipReason::TooFewEntities));
    }
    if m > MAX_ENTITIES {
        return Ok(Normalized::Skipped(SkipReason::TooManyEntities));
    }

    // One label per ordered pair; a named relation wins over NA, the first
    // named relation wins over later ones.
    let mut labels: BTreeMap<(usize, usize), RelationTriple> = BTreeMap::new();
    for t in &s.triples {
        let (a, b) = (remap[t.subject], remap[t.object]);
        if a == b {
            report.self_loops_dropped += 1;
            continue;
        }
        let triple = RelationTriple {
            subject: a,
            object: b,
            relation: t.relation.clone(),
            provenance: t.provenance,
        };
        match labels.get(&(a, b)) {
            None => {
                labels.insert((a, b), triple);
            }
            Some(existing) if existing.relation == triple.relation => {}
            Some(existing) if existing.is_na() => {
                labels.insert((a, b), triple);
            }
            Some(_) => {
                if !triple.is_na() {
                    report.conflicting_labels_dropped += 1;
                }
            }
        }
    }

    let named: Vec<RelationTriple> = labels.values().filter(|t| !t.is_na()).cloned().collect();
    for t in named {
        let Some(inv) = vocab.inverse(&t.relation) else {
            continue;
        };
        let key = (t.object, t.subject);
        if labels.get(&key).is_some_and(|e| !e.is_na()) {
            continue;
        }
        labels.insert(
            key,
            RelationTriple {
                subject: t.object,
                object: t.subject,
                relation: inv.to_string(),
                provenance: Provenance::Reversed,
            },
        );
        report.reversed_added += 1;
    }

    for a in 0..m {
        for b in 0..m {
            if a != b && !labels.contains_key(&(a, b)) {
                labels.insert(
                    (a, b),
                    RelationTriple {
                        subject: a,
                        object: b,
                        relation: NA.to_string(),
                        provenance: Provenance::NaFilled,
                    },
                );
                report.na_added += 1;
            }
        }
    }

    Ok(Normalized::Kept(Sentence {
        id: s.id.clone(),
        tokens: s.tokens.clone(),
        entities,
        triples: labels.into_values().collect(),
    }))
}

/// Normalises a corpus in order, returning kept sentences and counters.
pub fn normalize_corpus(
    sentences: &[Sentence],
    vocab: &RelationVocab,
) -> Result<(Vec<Sentence>, NormalizationReport)> {
    let mut report = NormalizationReport {
        input: sentences.len(),
        ..Default::default()
    };
    let mut kept = Vec::with_capacity(sentences.len());
    for s in sentences {
        match normalize_counted(s, vocab, &mut report) {
            Ok(Normalized::Kept(n)) => kept.push(n),
            Ok(Normalized::Skipped(reason)) => *report.skipped.entry(reason).or_default() += 1,
            Err(Error::UnknownRelation(r)) => {
                return Err(Error::Data(format!(
                    "sentence `{}`: relation `{r}` is not in the vocabulary",
                    s.id
                )))
            }
            Err(e) => return Err(e),
        }
    }
    report.kept = kept.len();
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> RelationVocab {
        RelationVocab::new(
            ["NA", "part of", "has a member", "located in"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
        .with_inverses(&BTreeMap::from([(
            "part of".to_string(),
            "has a member".to_string(),
        )]))
        .unwrap()
    }

    fn sentence(m: usize, triples: Vec<RelationTriple>) -> Sentence {
        Sentence {
            id: "s".into(),
            tokens: (0..m).map(|i| format!("w{i}")).collect(),
            entities: (0..m).map(|i| EntityMention::new(i, i + 1)).collect(),
            triples,
        }
    }

    fn kept(n: Normalized) -> Sentence {
        match n {
            Normalized::Kept(s) => s,
            Normalized::Skipped(r) => panic!("unexpectedly skipped: {r:?}"),
        }
    }

    #[test]
    fn reversed_edge_is_added() {
        let s = Sentence {
            id: "earth".into(),
            tokens: ["Earth", "is", "part", "of", "the", "Solar", "System"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            entities: vec![EntityMention::new(0, 1), EntityMention::new(5, 7)],
            triples: vec![RelationTriple::gold(0, 1, "part of")],
        };
        let n = kept(normalize_sentence(&s, &vocab()).unwrap());
        assert_eq!(n.relation(1, 0), Some("has a member"));
        let rev = n.triples.iter().find(|t| t.subject == 1).unwrap();
        assert_eq!(rev.provenance, Provenance::Reversed);
        assert_eq!(n.triples.len(), 2);
    }

    #[test]
    fn na_fill_counts() {
        let s = sentence(3, vec![RelationTriple::gold(0, 1, "part of")]);
        let mut report = NormalizationReport::default();
        let n = kept(normalize_counted(&s, &vocab(), &mut report).unwrap());
        assert_eq!(n.triples.len(), 6);
        assert_eq!(report.reversed_added, 1);
        assert_eq!(report.na_added, 4);
    }

    #[test]
    fn entity_count_limits() {
        let v = vocab();
        assert_eq!(
            normalize_sentence(&sentence(10, vec![]), &v).unwrap(),
            Normalized::Skipped(SkipReason::TooManyEntities)
        );
        assert_eq!(
            normalize_sentence(&sentence(1, vec![]), &v).unwrap(),
            Normalized::Skipped(SkipReason::TooFewEntities)
        );
        assert_eq!(
            kept(normalize_sentence(&sentence(9, vec![]), &v).unwrap())
                .triples
                .len(),
            72
        );
    }

    #[test]
    fn identical_spans_merge_and_self_loops_drop() {
        let mut s = sentence(
            3,
            vec![
                RelationTriple::gold(1, 3, "located in"),
                RelationTriple::gold(0, 2, "located in"),
            ],
        );
        s.entities.push(EntityMention::new(1, 2).with_kb_id("Q9"));
        let mut report = NormalizationReport::default();
        let n = kept(normalize_counted(&s, &vocab(), &mut report).unwrap());
        assert_eq!(n.entities.len(), 3);
        assert_eq!(n.entities[1].kb_id.as_deref(), Some("Q9"));
        assert_eq!(report.merged_mentions, 1);
        assert_eq!(report.self_loops_dropped, 1);
        assert_eq!(n.relation(0, 2), Some("located in"));
    }

    #[test]
    fn overlapping_spans_are_skipped() {
        let mut s = sentence(3, vec![]);
        s.entities[1] = EntityMention::new(0, 2);
        assert_eq!(
            normalize_sentence(&s, &vocab()).unwrap(),
            Normalized::Skipped(SkipReason::OverlappingSpans)
        );
    }

    #[test]
    fn unknown_relation_is_an_error() {
        let s = sentence(2, vec![RelationTriple::gold(0, 1, "capital of")]);
        assert!(matches!(
            normalize_sentence(&s, &vocab()),
            Err(Error::UnknownRelation(_))
        ));
        assert!(matches!(
            normalize_corpus(&[s], &vocab()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn normalisation_is_idempotent() {
        let s = sentence(
            4,
            vec![
                RelationTriple::gold(0, 1, "part of"),
                RelationTriple::gold(2, 3, "located in"),
            ],
        );
        let once = kept(normalize_sentence(&s, &vocab()).unwrap());
        let twice = kept(normalize_sentence(&once, &vocab()).unwrap());
        assert_eq!(once, twice);
    }

    #[test]
    fn corpus_report_counts_skips() {
        let v = vocab();
        let (out, report) = normalize_corpus(
            &[
                sentence(2, vec![]),
                sentence(10, vec![]),
                sentence(3, vec![]),
            ],
            &v,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(report.kept, 2);
        assert_eq!(report.skipped[&SkipReason::TooManyEntities], 1);
        assert_eq!(report.skipped_total(), 1);
    }
}
