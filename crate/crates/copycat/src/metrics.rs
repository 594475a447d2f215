//! Evaluation metrics: ROUGE-1/2/L F1, Best-Worst Scaling aggregation, and
//! content-support aggregation.
//!
//! Conventions: no stemming, no stopword removal; callers are expected to
//! pass case-folded tokens (the [`crate::corpus::tokenize`] output already
//! is). Multi-reference scores are the arithmetic mean over references.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no judgments given")]
    EmptyJudgments,
    #[error("judgment {item_id}: best and worst are both {system}")]
    BestEqualsWorst { item_id: String, system: String },
    #[error("judgment {item_id}: {system} is not among the listed systems")]
    UnknownSystem { item_id: String, system: String },
    #[error("no labels given")]
    EmptyLabels,
}

/// Precision, recall, and their harmonic mean for one ROUGE variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    const ZERO: RougeScore = RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 };

    fn from_counts(overlap: usize, candidate_total: usize, reference_total: usize) -> Self {
        if candidate_total == 0 || reference_total == 0 {
            return Self::ZERO;
        }
        let precision = overlap as f64 / candidate_total as f64;
        let recall = overlap as f64 / reference_total as f64;
        Self { precision, recall, f1: f1(precision, recall) }
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn ngram_counts<'a, T: AsRef<str>>(tokens: &'a [T], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram overlap counts.
pub fn rouge_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);
    let cand_total: usize = cand.values().sum();
    let ref_total: usize = refr.values().sum();
    let overlap: usize = cand
        .iter()
        .map(|(gram, &count)| count.min(refr.get(gram).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(overlap, cand_total, ref_total)
}

fn lcs_length<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // One-row DP; `prev` holds table[i-1][j-1] before it is overwritten.
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = row[j + 1];
            row[j + 1] = if x.as_ref() == y.as_ref() {
                prev + 1
            } else {
                row[j + 1].max(row[j])
            };
            prev = cur;
        }
    }
    row[b.len()]
}

/// ROUGE-L from the longest common subsequence.
pub fn rouge_l<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_length(candidate, reference), candidate.len(), reference.len())
}

fn mean_scores(scores: &[RougeScore]) -> RougeScore {
    if scores.is_empty() {
        return RougeScore::ZERO;
    }
    let n = scores.len() as f64;
    RougeScore {
        precision: scores.iter().map(|s| s.precision).sum::<f64>() / n,
        recall: scores.iter().map(|s| s.recall).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Mean ROUGE-N over several references.
pub fn rouge_n_multi<T: AsRef<str>, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    n: usize,
) -> RougeScore {
    let scores: Vec<RougeScore> =
        references.iter().map(|r| rouge_n(candidate, r.as_ref(), n)).collect();
    mean_scores(&scores)
}

/// Mean ROUGE-L over several references.
pub fn rouge_l_multi<T: AsRef<str>, R: AsRef<[T]>>(candidate: &[T], references: &[R]) -> RougeScore {
    let scores: Vec<RougeScore> =
        references.iter().map(|r| rouge_l(candidate, r.as_ref())).collect();
    mean_scores(&scores)
}

/// One best-worst annotation: the judge saw `systems` for one item and named
/// a best and a worst among them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BwsJudgment {
    pub item_id: String,
    pub systems: Vec<String>,
    pub best: String,
    pub worst: String,
}

impl BwsJudgment {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.best == self.worst {
            return Err(MetricsError::BestEqualsWorst {
                item_id: self.item_id.clone(),
                system: self.best.clone(),
            });
        }
        for name in [&self.best, &self.worst] {
            if !self.systems.contains(name) {
                return Err(MetricsError::UnknownSystem {
                    item_id: self.item_id.clone(),
                    system: name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Best-Worst Scaling: per system, (times best − times worst) / appearances.
/// Scores lie in [−1, 1].
pub fn bws_scores(
    judgments: &[BwsJudgment],
) -> Result<std::collections::BTreeMap<String, f64>, MetricsError> {
    if judgments.is_empty() {
        return Err(MetricsError::EmptyJudgments);
    }
    let mut tallies: std::collections::BTreeMap<String, (i64, i64)> =
        std::collections::BTreeMap::new();
    for judgment in judgments {
        judgment.validate()?;
        for system in &judgment.systems {
            let entry = tallies.entry(system.clone()).or_insert((0, 0));
            entry.1 += 1;
            if *system == judgment.best {
                entry.0 += 1;
            } else if *system == judgment.worst {
                entry.0 -= 1;
            }
        }
    }
    Ok(tallies
        .into_iter()
        .map(|(system, (net, appearances))| (system, net as f64 / appearances as f64))
        .collect())
}

/// Annotator verdict on whether a summary sentence is backed by the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportLabel {
    Full,
    Partial,
    No,
}

impl std::str::FromStr for SupportLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(SupportLabel::Full),
            "partial" => Ok(SupportLabel::Partial),
            "no" | "none" => Ok(SupportLabel::No),
            other => Err(format!("unknown support label {other:?}")),
        }
    }
}

/// Class percentages over content-support labels; sums to 100 within
/// floating-point rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupportBreakdown {
    pub full_pct: f64,
    pub partial_pct: f64,
    pub no_pct: f64,
}

pub fn content_support_aggregate(
    labels: &[SupportLabel],
) -> Result<SupportBreakdown, MetricsError> {
    if labels.is_empty() {
        return Err(MetricsError::EmptyLabels);
    }
    let total = labels.len() as f64;
    let count = |wanted: SupportLabel| {
        labels.iter().filter(|&&label| label == wanted).count() as f64 * 100.0 / total
    };
    Ok(SupportBreakdown {
        full_pct: count(SupportLabel::Full),
        partial_pct: count(SupportLabel::Partial),
        no_pct: count(SupportLabel::No),
    })
}
