//! Sentence-level metrics, bag-level max scoring, P@K% and PR curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class index of the no-relation label.
pub const NA_CLASS: usize = 0;

/// Model output for one ordered entity pair of one sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sentence_id: String,
    pub subject: usize,
    pub object: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_kb: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_kb: Option<String>,
    pub probabilities: Vec<f64>,
    /// Gold class index, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<usize>,
}

impl PredictionRecord {
    /// Highest-probability class; ties go to the lower index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }

    pub fn bag_key(&self) -> Option<BagKey> {
        Some(BagKey {
            subject: self.subject_kb.clone()?,
            object: self.object_kb.clone()?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassCounts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SentenceMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub records: usize,
    /// Counts for every non-NA class seen in gold or predictions.
    pub per_class: BTreeMap<usize, ClassCounts>,
}

/// Accuracy over all labelled records (NA included) and macro-F1 over the
/// non-NA classes present in gold labels or predictions. Records without a
/// gold label are ignored.
pub fn sentence_metrics(records: &[PredictionRecord]) -> Result<SentenceMetrics> {
    let mut per_class: BTreeMap<usize, ClassCounts> = BTreeMap::new();
    let mut correct = 0;
    let mut total = 0;
    for r in records {
        let Some(gold) = r.gold else { continue };
        let pred = r.predicted();
        total += 1;
        if pred == gold {
            correct += 1;
            if gold != NA_CLASS {
                per_class.entry(gold).or_default().tp += 1;
            }
        } else {
            if gold != NA_CLASS {
                per_class.entry(gold).or_default().fn_ += 1;
            }
            if pred != NA_CLASS {
                per_class.entry(pred).or_default().fp += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Data("no labelled prediction records".into()));
    }
    let macro_f1 = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(ClassCounts::f1).sum::<f64>() / per_class.len() as f64
    };
    Ok(SentenceMetrics {
        accuracy: correct as f64 / total as f64,
        macro_f1,
        records: total,
        per_class,
    })
}

/// Aggregation unit across sentences: an ordered pair of knowledge-base ids.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BagKey {
    pub subject: String,
    pub object: String,
}

/// Per-relation bag scores and the number of records skipped for lacking
/// knowledge-base ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BagScores {
    pub scores: BTreeMap<BagKey, Vec<f64>>,
    pub excluded: usize,
}

/// Bag score of each relation: the maximum of its probability over the
/// bag's sentences.
pub fn score_bags(records: &[PredictionRecord]) -> BagScores {
    let mut out = BagScores::default();
    for r in records {
        let Some(key) = r.bag_key() else {
            out.excluded += 1;
            continue;
        };
        match out.scores.get_mut(&key) {
            Some(best) => {
                for (b, &p) in best.iter_mut().zip(&r.probabilities) {
                    *b = b.max(p);
                }
            }
            None => {
                out.scores.insert(key, r.probabilities.clone());
            }
        }
    }
    out
}

/// Non-NA facts `(bag, relation)` asserted by gold labels.
pub fn gold_facts(records: &[PredictionRecord]) -> BTreeSet<(BagKey, usize)> {
    records
        .iter()
        .filter_map(|r| match (r.bag_key(), r.gold) {
            (Some(k), Some(g)) if g != NA_CLASS => Some((k, g)),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedFact {
    pub key: BagKey,
    pub relation: usize,
    pub score: f64,
    pub correct: bool,
}

/// Every `(bag, non-NA relation)` candidate, by score descending; ties are
/// broken by bag key, then relation index.
pub fn rank_facts(bags: &BagScores, gold: &BTreeSet<(BagKey, usize)>) -> Vec<RankedFact> {
    let mut facts: Vec<RankedFact> = bags
        .scores
        .iter()
        .flat_map(|(key, scores)| {
            scores
                .iter()
                .enumerate()
                .skip(1)
                .map(move |(r, &score)| RankedFact {
                    correct: gold.contains(&(key.clone(), r)),
                    key: key.clone(),
                    relation: r,
                    score,
                })
        })
        .collect();
    facts.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.key.cmp(&b.key))
            .then_with(|| a.relation.cmp(&b.relation))
    });
    facts
}

/// Size of the ranked population used for P@K%.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Population {
    /// All non-NA bag-level candidates.
    #[default]
    Predictions,
    /// The number of gold facts.
    GoldSize,
}

/// Number of top-ranked facts evaluated at `k` percent of `population`.
pub fn top_count(k: f64, population: usize) -> Result<usize> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::Config(format!("k must lie in (0, 100], got {k}")));
    }
    // Guard against 5 * 40 / 100 landing just above an integer.
    Ok(((k * population as f64 / 100.0) - 1e-9).ceil().max(0.0) as usize)
}

/// Precision among the top `ceil(k% * population)` ranked facts.
pub fn precision_at_k_percent(ranked: &[RankedFact], k: f64, population: usize) -> Result<f64> {
    let n = top_count(k, population)?.min(ranked.len());
    if n == 0 {
        return Ok(0.0);
    }
    Ok(ranked[..n].iter().filter(|f| f.correct).count() as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    pub rank: usize,
    pub score: f64,
    pub correct: bool,
    pub precision: f64,
    pub recall: f64,
}

/// One precision/recall point per rank (1-based).
pub fn pr_curve_points(ranked: &[RankedFact], total_gold: usize) -> Result<Vec<PrPoint>> {
    if total_gold == 0 {
        return Err(Error::Data("no gold facts; recall is undefined".into()));
    }
    let mut hits = 0;
    Ok(ranked
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.correct {
                hits += 1;
            }
            PrPoint {
                rank: i + 1,
                score: f.score,
                correct: f.correct,
                precision: hits as f64 / (i + 1) as f64,
                recall: hits as f64 / total_gold as f64,
            }
        })
        .collect())
}

/// Area under the step-wise PR curve (sum of precision times recall gain).
pub fn pr_area(points: &[PrPoint]) -> f64 {
    let mut prev = 0.0;
    let mut area = 0.0;
    for p in points {
        area += p.precision * (p.recall - prev);
        prev = p.recall;
    }
    area
}

pub fn write_pr_csv(points: &[PrPoint], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::file(path, e);
    writeln!(w, "rank,score,correct,precision,recall").map_err(io)?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.rank, p.score, p.correct as u8, p.precision, p.recall
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub const P_AT_LEVELS: [u32; 4] = [5, 10, 15, 20];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportCounts {
    pub records: usize,
    pub excluded_without_kb_id: usize,
    pub bags: usize,
    pub candidates: usize,
    pub gold_facts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Absent when there are no gold facts to rank against.
    pub p_at: BTreeMap<String, Option<f64>>,
    pub counts: ReportCounts,
    pub decisions: BTreeMap<String, String>,
}

/// Full report plus the PR curve (empty when there are no gold facts).
pub fn metrics_report(
    records: &[PredictionRecord],
    population: Population,
) -> Result<(MetricsReport, Vec<PrPoint>)> {
    let sentence = sentence_metrics(records)?;
    let bags = score_bags(records);
    let gold = gold_facts(records);
    let ranked = rank_facts(&bags, &gold);
    let size = match population {
        Population::Predictions => ranked.len(),
        Population::GoldSize => gold.len(),
    };
    let mut p_at = BTreeMap::new();
    for k in P_AT_LEVELS {
        let value = if gold.is_empty() {
            None
        } else {
            Some(precision_at_k_percent(&ranked, k as f64, size)?)
        };
        p_at.insert(k.to_string(), value);
    }
    let curve = if gold.is_empty() {
        Vec::new()
    } else {
        pr_curve_points(&ranked, gold.len())?
    };
    let population_name = match population {
        Population::Predictions => "predictions: all non-NA bag-level candidates",
        Population::GoldSize => "gold-size: number of gold facts",
    };
    let decisions = BTreeMap::from([
        (
            "accuracy".to_string(),
            "over all ordered pairs, NA included".to_string(),
        ),
        (
            "macro_f1".to_string(),
            "mean per-class F1 over non-NA classes present in gold or predictions".to_string(),
        ),
        (
            "bag_scoring".to_string(),
            "per-relation max over the bag's sentences".to_string(),
        ),
        ("p_at_population".to_string(), population_name.to_string()),
        (
            "ranking_ties".to_string(),
            "score descending, then bag key, then relation index".to_string(),
        ),
    ]);
    let report = MetricsReport {
        accuracy: sentence.accuracy,
        macro_f1: sentence.macro_f1,
        p_at,
        counts: ReportCounts {
            records: records.len(),
            excluded_without_kb_id: bags.excluded,
            bags: bags.scores.len(),
            candidates: ranked.len(),
            gold_facts: gold.len(),
        },
        decisions,
    };
    Ok((report, curve))
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r)?).map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}
