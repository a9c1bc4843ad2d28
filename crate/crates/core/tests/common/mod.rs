#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use gpgnn::corpus::{EntityMention, RelationTriple, Sentence};
use gpgnn::model::{RelationVocab, NA};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Relations for random sentences: one inverse pair, one symmetric relation
/// and one without an inverse.
pub fn random_vocab() -> RelationVocab {
    let names = [NA, "born_in", "birthplace_of", "sibling", "member_of"];
    let inverses = BTreeMap::from([
        ("born_in".to_string(), "birthplace_of".to_string()),
        ("sibling".to_string(), "sibling".to_string()),
    ]);
    RelationVocab::new(names.iter().map(|s| s.to_string()).collect())
        .unwrap()
        .with_inverses(&inverses)
        .unwrap()
}

/// A raw sentence with 0..=11 mentions (duplicate and overlapping spans
/// allowed) and random, possibly conflicting, triples.
pub fn random_sentence(rng: &mut ChaCha8Rng, id: usize) -> Sentence {
    let len = rng.gen_range(4..30);
    let tokens = (0..len)
        .map(|_| format!("w{}", rng.gen_range(0..50)))
        .collect();
    let mentions = rng.gen_range(0..=11);
    let mut entities = Vec::new();
    for _ in 0..mentions {
        let width = rng.gen_range(1..=2);
        let start = rng.gen_range(0..len - width + 1);
        let mut e = EntityMention::new(start, start + width);
        if rng.gen_bool(0.7) {
            e = e.with_kb_id(format!("Q{}", rng.gen_range(0..100)));
        }
        entities.push(e);
    }
    // Prefer disjoint spans most of the time so that plenty are kept.
    if rng.gen_bool(0.8) {
        let mut taken = vec![false; len];
        entities.retain(|e| {
            let free = (e.start..e.end).all(|t| !taken[t]);
            (e.start..e.end).for_each(|t| taken[t] = true);
            free
        });
        if let Some(first) = entities.first().cloned() {
            if rng.gen_bool(0.2) {
                entities.push(first);
            }
        }
    }
    let names = ["born_in", "birthplace_of", "sibling", "member_of", NA];
    let mut triples = Vec::new();
    if entities.len() >= 2 {
        for _ in 0..rng.gen_range(0..8) {
            let s = rng.gen_range(0..entities.len());
            let o = rng.gen_range(0..entities.len());
            triples.push(RelationTriple::gold(s, o, *names.choose(rng).unwrap()));
        }
    }
    Sentence {
        id: format!("r{id}"),
        tokens,
        entities,
        triples,
    }
}

/// Cycle test via edge and component counts of the simple undirected graph
/// of named relations.
pub fn has_cycle_by_counting(s: &Sentence) -> bool {
    let m = s.entities.len();
    let edges: BTreeSet<(usize, usize)> = s
        .triples
        .iter()
        .filter(|t| t.relation != NA && t.subject != t.object)
        .map(|t| (t.subject.min(t.object), t.subject.max(t.object)))
        .collect();
    let mut seen = vec![false; m];
    let mut components = 0;
    for start in 0..m {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for &(a, b) in &edges {
                let next = if a == v {
                    b
                } else if b == v {
                    a
                } else {
                    continue;
                };
                if !seen[next] {
                    seen[next] = true;
                    stack.push(next);
                }
            }
        }
    }
    edges.len() + components > m
}

/// Counts from [`check_preprocessing_properties`].
#[derive(Debug, Default)]
pub struct PreprocessStats {
    pub kept: usize,
    pub skipped: usize,
    pub dense: usize,
}

/// Normalises `n` random sentences and checks pair completeness, reversal
/// closure, idempotence and the dense/rest partition.
pub fn check_preprocessing_properties(n: usize, seed: u64) -> Result<PreprocessStats, String> {
    use gpgnn::corpus::{normalize_sentence, split_dense_subset, Normalized};
    use rand::SeedableRng;

    let vocab = random_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = PreprocessStats::default();
    let mut kept = Vec::new();
    for i in 0..n {
        let raw = random_sentence(&mut rng, i);
        let out = match normalize_sentence(&raw, &vocab).map_err(|e| e.to_string())? {
            Normalized::Kept(s) => s,
            Normalized::Skipped(_) => {
                stats.skipped += 1;
                continue;
            }
        };
        let m = out.entities.len();
        if !(2..=9).contains(&m) {
            return Err(format!("{}: kept with {m} entities", raw.id));
        }
        let pairs: BTreeSet<(usize, usize)> =
            out.triples.iter().map(|t| (t.subject, t.object)).collect();
        if out.triples.len() != m * (m - 1) || pairs.len() != m * (m - 1) {
            return Err(format!(
                "{}: {} triples for m={m}",
                raw.id,
                out.triples.len()
            ));
        }
        if pairs.iter().any(|&(a, b)| a == b || a >= m || b >= m) {
            return Err(format!("{}: invalid pair", raw.id));
        }
        let label: BTreeMap<(usize, usize), &str> = out
            .triples
            .iter()
            .map(|t| ((t.subject, t.object), t.relation.as_str()))
            .collect();
        for t in &out.triples {
            if let Some(inv) = vocab.inverse(&t.relation) {
                let back = label[&(t.object, t.subject)];
                if back == NA {
                    return Err(format!(
                        "{}: ({}, {}, {}) has no reverse",
                        raw.id, t.subject, t.object, t.relation
                    ));
                }
                // A reverse that was not asserted in the input is the inverse.
                let asserted = raw.triples.iter().any(|r| {
                    r.relation != NA
                        && out.entities[t.object].same_span(&raw.entities[r.subject])
                        && out.entities[t.subject].same_span(&raw.entities[r.object])
                });
                if !asserted && back != inv {
                    return Err(format!("{}: reverse of {} is {back}", raw.id, t.relation));
                }
            }
        }
        match normalize_sentence(&out, &vocab).map_err(|e| e.to_string())? {
            Normalized::Kept(again) if again == out => {}
            _ => return Err(format!("{}: normalisation is not idempotent", raw.id)),
        }
        kept.push(out);
    }
    stats.kept = kept.len();
    let expected: Vec<bool> = kept
        .iter()
        .map(|s| s.entities.len() > 2 && has_cycle_by_counting(s))
        .collect();
    let (dense, rest) = split_dense_subset(kept.clone());
    stats.dense = dense.len();
    let (want_dense, want_rest): (Vec<_>, Vec<_>) =
        kept.iter().zip(&expected).partition(|(_, &d)| d);
    let want_dense: Vec<&Sentence> = want_dense.into_iter().map(|(s, _)| s).collect();
    let want_rest: Vec<&Sentence> = want_rest.into_iter().map(|(s, _)| s).collect();
    if dense.iter().collect::<Vec<_>>() != want_dense
        || rest.iter().collect::<Vec<_>>() != want_rest
    {
        return Err("dense/rest partition disagrees with the cycle oracle".into());
    }
    Ok(stats)
}

pub fn record(
    sentence: &str,
    kb: Option<(&str, &str)>,
    probabilities: Vec<f64>,
    gold: usize,
) -> gpgnn::evaluation::PredictionRecord {
    gpgnn::evaluation::PredictionRecord {
        sentence_id: sentence.into(),
        subject: 0,
        object: 1,
        subject_kb: kb.map(|k| k.0.to_string()),
        object_kb: kb.map(|k| k.1.to_string()),
        probabilities,
        gold: Some(gold),
    }
}

/// A random distribution over `classes`.
pub fn random_distribution(rng: &mut ChaCha8Rng, classes: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Random records over `bags` entity pairs with several sentences each.
pub fn random_records(
    rng: &mut ChaCha8Rng,
    bags: usize,
    classes: usize,
    relational: f64,
) -> Vec<gpgnn::evaluation::PredictionRecord> {
    let mut out = Vec::new();
    for b in 0..bags {
        let (s, o) = (format!("Q{b}"), format!("Q{}", b + bags));
        for k in 0..rng.gen_range(1..4) {
            let gold = if rng.gen_bool(relational) {
                rng.gen_range(1..classes)
            } else {
                0
            };
            out.push(record(
                &format!("s{b}-{k}"),
                Some((&s, &o)),
                random_distribution(rng, classes),
                gold,
            ));
        }
    }
    out
}

/// Exact checks of bag scoring, P@K%, PR curves and macro-F1.
pub fn check_metric_properties(seed: u64) -> Result<(), String> {
    use gpgnn::evaluation::*;
    use rand::SeedableRng;

    let ensure = |ok: bool, what: &str| if ok { Ok(()) } else { Err(what.to_string()) };

    // Max semantics on a three-sentence bag.
    let key = Some(("A", "B"));
    let bag = vec![
        record("s1", key, vec![0.8, 0.2], 1),
        record("s2", key, vec![0.3, 0.7], 1),
        record("s3", key, vec![0.5, 0.5], 1),
    ];
    let scores = score_bags(&bag);
    let k = BagKey {
        subject: "A".into(),
        object: "B".into(),
    };
    ensure(
        scores.scores[&k] == vec![0.8, 0.7],
        "bag score is not the per-relation max",
    )?;
    let single = score_bags(&bag[..1]);
    ensure(
        single.scores[&k] == bag[0].probabilities,
        "single-sentence bag differs",
    )?;

    // Hand-computed confusion: A has 1 TP and 1 FN, B has 1 TP and 1 FP.
    let confusion = vec![
        record("c1", None, vec![0.1, 0.8, 0.1], 1),
        record("c2", None, vec![0.1, 0.1, 0.8], 1),
        record("c3", None, vec![0.1, 0.1, 0.8], 2),
    ];
    let m = sentence_metrics(&confusion).map_err(|e| e.to_string())?;
    ensure(m.per_class[&1].f1() == 2.0 / 3.0, "F1 of A is not 2/3")?;
    ensure(m.per_class[&2].f1() == 2.0 / 3.0, "F1 of B is not 2/3")?;
    ensure(m.macro_f1 == 2.0 / 3.0, "macro-F1 is not 2/3")?;

    // 40 ranked facts, 5% -> top 2 evaluated, 1 correct.
    let ranked: Vec<RankedFact> = (0..40)
        .map(|i| RankedFact {
            key: BagKey {
                subject: format!("s{i}"),
                object: "o".into(),
            },
            relation: 1,
            score: 1.0 - i as f64 / 100.0,
            correct: i == 1 || i > 30,
        })
        .collect();
    ensure(
        precision_at_k_percent(&ranked, 5.0, 40).map_err(|e| e.to_string())? == 0.5,
        "P@5% of 40",
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for round in 0..50 {
        let classes = rng.gen_range(2..6);
        let bags = rng.gen_range(1..40);
        let records = random_records(&mut rng, bags, classes, 0.4);
        let bags = score_bags(&records);
        let gold = gold_facts(&records);
        let ranked = rank_facts(&bags, &gold);

        // Adding sentences never lowers a bag score.
        let extra = random_records(&mut rng, 40, classes, 0.4);
        let mut superset = records.clone();
        superset.extend(extra);
        let bigger = score_bags(&superset);
        for (key, s) in &bags.scores {
            let b = &bigger.scores[key];
            ensure(
                s.iter().zip(b).all(|(x, y)| y >= x),
                "superset lowered a bag score",
            )?;
        }

        // P@100% equals the overall precision of the ranking.
        let correct = ranked.iter().filter(|f| f.correct).count();
        let p100 =
            precision_at_k_percent(&ranked, 100.0, ranked.len()).map_err(|e| e.to_string())?;
        ensure(
            p100 == correct as f64 / ranked.len() as f64,
            "P@100% differs from precision",
        )?;

        if !gold.is_empty() {
            let curve = pr_curve_points(&ranked, gold.len()).map_err(|e| e.to_string())?;
            ensure(
                curve.windows(2).all(|w| w[1].recall >= w[0].recall),
                "recall decreases",
            )?;
            let first = &curve[0];
            ensure(
                first.precision == if ranked[0].correct { 1.0 } else { 0.0 },
                "first PR point",
            )?;
            let last = curve.last().unwrap();
            ensure(
                last.recall == correct as f64 / gold.len() as f64,
                "final recall",
            )?;
        }

        // Macro-F1 ignores record order and duplication of the whole set.
        let base = sentence_metrics(&records).map_err(|e| e.to_string())?;
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rng);
        let mut doubled = records.clone();
        doubled.extend(records.clone());
        for other in [&shuffled, &doubled] {
            let m = sentence_metrics(other).map_err(|e| e.to_string())?;
            if (m.macro_f1 - base.macro_f1).abs() > 1e-15
                || (m.accuracy - base.accuracy).abs() > 1e-15
            {
                return Err(format!(
                    "round {round}: macro-F1 changed under reorder/duplication"
                ));
            }
        }
    }
    Ok(())
}

/// Encoded splits of a synthetic corpus with a training-split vocabulary.
pub struct Prepared {
    pub corpus: gpgnn::corpus::synth::SynthCorpus,
    pub vocab: gpgnn::corpus::Vocabulary,
    pub train: Vec<gpgnn::model::EncodedSentence>,
    pub valid: Vec<gpgnn::model::EncodedSentence>,
    pub test: Vec<gpgnn::model::EncodedSentence>,
}

pub fn prepare(spec: &gpgnn::corpus::synth::SynthSpec) -> Prepared {
    use gpgnn::model::EncodedSentence;
    let corpus = gpgnn::corpus::synth::synthesize_multihop_corpus(spec).unwrap();
    let vocab = gpgnn::corpus::Vocabulary::build(&corpus.train);
    let enc = |split: &[Sentence]| {
        split
            .iter()
            .map(|s| EncodedSentence::new(s, &vocab, &corpus.relations).unwrap())
            .collect::<Vec<_>>()
    };
    let (train, valid, test) = (enc(&corpus.train), enc(&corpus.valid), enc(&corpus.test));
    Prepared {
        corpus,
        vocab,
        train,
        valid,
        test,
    }
}

/// A configuration small enough for quick training tests.
pub fn small_config() -> gpgnn::training::TrainConfig {
    gpgnn::training::TrainConfig {
        hidden_size: 12,
        word_dim: 8,
        position_dim: 3,
        node_dim: Some(4),
        batch_size: 5,
        epochs: 3,
        ..Default::default()
    }
}
