//! Extractive comparison systems: clustroid, lead, random, oracle, and a
//! continuous LexRank over the group's sentences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{tokenize, SourceGroup};
use crate::metrics::rouge_l;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("group {group_id:?} has no reviews")]
    EmptyGroup { group_id: String },
    #[error("clustroid needs at least two reviews, group {group_id:?} has {found}")]
    SingletonGroup { group_id: String, found: usize },
    #[error("oracle selection needs at least one reference summary")]
    NoReferences,
    #[error("group {group_id:?} has no sentences")]
    NoSentences { group_id: String },
}

/// Splits on `.`, `!`, or `?` followed by whitespace or end of text; the
/// terminator stays attached. Interior punctuation ("3.5 stars") does not
/// split.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0;
    for (i, &c) in chars.iter().enumerate() {
        let at_boundary = matches!(c, '.' | '!' | '?')
            && chars.get(i + 1).is_none_or(|next| next.is_whitespace());
        if at_boundary {
            let sentence: String = chars[start..=i].iter().collect();
            let sentence = sentence.trim();
            if !sentence.is_empty() {
                sentences.push(sentence.to_string());
            }
            start = i + 1;
        }
    }
    if start < chars.len() {
        let tail: String = chars[start..].iter().collect();
        let tail = tail.trim();
        if !tail.is_empty() {
            sentences.push(tail.to_string());
        }
    }
    sentences
}

fn review_tokens(group: &SourceGroup) -> Vec<Vec<String>> {
    group.reviews.iter().map(|r| tokenize(&r.text)).collect()
}

/// Index of the review with the highest mean ROUGE-L F1 against the rest of
/// the group; ties go to the lowest index.
pub fn clustroid(group: &SourceGroup) -> Result<usize, BaselineError> {
    let n = group.reviews.len();
    if n < 2 {
        return Err(BaselineError::SingletonGroup { group_id: group.group_id.clone(), found: n });
    }
    let tokens = review_tokens(group);
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..n {
        let mean: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| rouge_l(&tokens[i], &tokens[j]).f1)
            .sum::<f64>()
            / (n - 1) as f64;
        if mean > best.1 {
            best = (i, mean);
        }
    }
    Ok(best.0)
}

/// First sentence of each review, concatenated in group order.
pub fn lead(group: &SourceGroup) -> Result<String, BaselineError> {
    if group.reviews.is_empty() {
        return Err(BaselineError::EmptyGroup { group_id: group.group_id.clone() });
    }
    let firsts: Vec<String> = group
        .reviews
        .iter()
        .filter_map(|r| split_sentences(&r.text).into_iter().next())
        .collect();
    Ok(firsts.join(" "))
}

/// Uniform seeded choice of a review index.
pub fn random_review(group: &SourceGroup, seed: u64) -> Result<usize, BaselineError> {
    if group.reviews.is_empty() {
        return Err(BaselineError::EmptyGroup { group_id: group.group_id.clone() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rng.random_range(0..group.reviews.len()))
}

/// Index of the review with the highest mean ROUGE-L F1 against the
/// references; ties go to the lowest index.
pub fn oracle(group: &SourceGroup, references: &[String]) -> Result<usize, BaselineError> {
    if group.reviews.is_empty() {
        return Err(BaselineError::EmptyGroup { group_id: group.group_id.clone() });
    }
    if references.is_empty() {
        return Err(BaselineError::NoReferences);
    }
    let ref_tokens: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).collect();
    let tokens = review_tokens(group);
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, review) in tokens.iter().enumerate() {
        let mean: f64 = ref_tokens.iter().map(|r| rouge_l(review, r).f1).sum::<f64>()
            / ref_tokens.len() as f64;
        if mean > best.1 {
            best = (i, mean);
        }
    }
    Ok(best.0)
}

/// One sentence of the group with its tf-idf weights.
#[derive(Debug, Clone)]
pub struct GraphSentence {
    pub review: usize,
    pub text: String,
    pub tokens: Vec<String>,
}

/// Sentences in document order, their cosine-similarity matrix, and the
/// PageRank centrality over it.
#[derive(Debug, Clone)]
pub struct SentenceGraph {
    pub sentences: Vec<GraphSentence>,
    pub similarity: Vec<Vec<f64>>,
    pub centrality: Vec<f64>,
}

fn tf_idf_vectors(sentences: &[GraphSentence]) -> Vec<std::collections::BTreeMap<String, f64>> {
    let s = sentences.len() as f64;
    let mut df: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for sentence in sentences {
        let mut seen: Vec<&str> = sentence.tokens.iter().map(String::as_str).collect();
        seen.sort_unstable();
        seen.dedup();
        for term in seen {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    sentences
        .iter()
        .map(|sentence| {
            let mut tf: std::collections::BTreeMap<String, f64> = std::collections::BTreeMap::new();
            for token in &sentence.tokens {
                *tf.entry(token.clone()).or_insert(0.0) += 1.0;
            }
            for (term, weight) in tf.iter_mut() {
                let idf = (s / df[term.as_str()] as f64).ln();
                *weight *= idf;
            }
            tf
        })
        .collect()
}

fn cosine(a: &std::collections::BTreeMap<String, f64>, b: &std::collections::BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(term, &wa)| b.get(term).map(|&wb| wa * wb))
        .sum();
    if dot == 0.0 {
        return 0.0;
    }
    let norm = |v: &std::collections::BTreeMap<String, f64>| {
        v.values().map(|w| w * w).sum::<f64>().sqrt()
    };
    dot / (norm(a) * norm(b))
}

/// Damped PageRank over a weighted similarity matrix: rows are normalized
/// into a transition matrix (all-zero rows become uniform), then
/// p ← (1−d)/S + d·Tᵀp is iterated until the L1 change drops below `tol`.
/// An all-zero matrix short-circuits to the uniform vector.
pub fn pagerank_centrality(similarity: &[Vec<f64>], damping: f64, tol: f64) -> Vec<f64> {
    let s = similarity.len();
    assert!(s > 0, "empty similarity matrix");
    assert!((0.0..1.0).contains(&damping) || damping == 0.0 || damping < 1.0);
    let uniform = vec![1.0 / s as f64; s];
    if similarity.iter().all(|row| row.iter().all(|&w| w == 0.0)) {
        return uniform;
    }
    let transition: Vec<Vec<f64>> = similarity
        .iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                uniform.clone()
            } else {
                row.iter().map(|w| w / total).collect()
            }
        })
        .collect();
    let mut p = uniform.clone();
    for _ in 0..100_000 {
        let mut next = vec![(1.0 - damping) / s as f64; s];
        for (i, row) in transition.iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                next[j] += damping * p[i] * t;
            }
        }
        let change: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if change < tol {
            break;
        }
    }
    p
}

/// Builds the sentence graph for a group: tf·ln(S/df) vectors over the
/// group's sentences, cosine similarities (diagonal zero), centrality.
pub fn build_sentence_graph(
    group: &SourceGroup,
    damping: f64,
) -> Result<SentenceGraph, BaselineError> {
    let mut sentences = Vec::new();
    for (review, source) in group.reviews.iter().enumerate() {
        for text in split_sentences(&source.text) {
            let tokens = tokenize(&text);
            sentences.push(GraphSentence { review, text, tokens });
        }
    }
    if sentences.is_empty() {
        return Err(BaselineError::NoSentences { group_id: group.group_id.clone() });
    }
    let vectors = tf_idf_vectors(&sentences);
    let s = sentences.len();
    let mut similarity = vec![vec![0.0; s]; s];
    for i in 0..s {
        for j in (i + 1)..s {
            let sim = cosine(&vectors[i], &vectors[j]);
            similarity[i][j] = sim;
            similarity[j][i] = sim;
        }
    }
    let centrality = pagerank_centrality(&similarity, damping, 1e-10);
    Ok(SentenceGraph { sentences, similarity, centrality })
}

/// Mean review length in tokens, the default LexRank budget.
pub fn default_budget(group: &SourceGroup) -> usize {
    if group.reviews.is_empty() {
        return 1;
    }
    let total: usize = group.reviews.iter().map(|r| tokenize(&r.text).len()).sum();
    ((total as f64 / group.reviews.len() as f64).round() as usize).max(1)
}

/// Continuous LexRank: rank sentences by centrality, take them in rank order
/// (ties to the earlier sentence) until the next would exceed the token
/// budget, then emit the picks in document order. Always emits at least one
/// sentence.
pub fn lexrank(
    group: &SourceGroup,
    damping: f64,
    budget_tokens: usize,
) -> Result<String, BaselineError> {
    let graph = build_sentence_graph(group, damping)?;
    let mut order: Vec<usize> = (0..graph.sentences.len()).collect();
    order.sort_by(|&a, &b| graph.centrality[b].total_cmp(&graph.centrality[a]).then(a.cmp(&b)));
    let mut picked = Vec::new();
    let mut used = 0usize;
    for idx in order {
        let cost = graph.sentences[idx].tokens.len();
        if picked.is_empty() || used + cost <= budget_tokens {
            used += cost;
            picked.push(idx);
        } else {
            break;
        }
    }
    picked.sort_unstable();
    let texts: Vec<&str> = picked.iter().map(|&i| graph.sentences[i].text.as_str()).collect();
    Ok(texts.join(" "))
}
