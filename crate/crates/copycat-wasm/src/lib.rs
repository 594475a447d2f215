//! Browser bindings for three interactive pieces of the summarizer: the
//! LexRank baseline, ROUGE scoring, and the KL annealing schedule. Every
//! entry point takes and returns JSON strings so the page stays free of
//! generated glue types; the same functions are unit-tested natively.

use serde::Serialize;
use wasm_bindgen::prelude::wasm_bindgen;

use copycat::baselines;
use copycat::corpus::{self, SourceGroup, SourceReview};
use copycat::metrics;
use copycat::objective::{anneal_beta, AnnealSchedule};

#[derive(Serialize)]
struct SentenceView {
    text: String,
    review: usize,
    centrality: f64,
    picked: bool,
}

#[derive(Serialize)]
struct LexrankView {
    summary: String,
    budget: usize,
    sentences: Vec<SentenceView>,
}

#[derive(Serialize)]
struct ErrorView {
    error: String,
}

fn err_json(message: impl std::fmt::Display) -> String {
    serde_json::to_string(&ErrorView { error: message.to_string() }).unwrap()
}

/// Runs the LexRank baseline over a JSON array of review strings.
///
/// Returns `{summary, budget, sentences: [{text, review, centrality,
/// picked}]}`, or `{error}` when the input is unusable. A `budget` of zero
/// asks for the default (mean review length in tokens).
#[wasm_bindgen]
pub fn lexrank_summary(reviews_json: &str, damping: f64, budget: usize) -> String {
    let reviews: Vec<String> = match serde_json::from_str(reviews_json) {
        Ok(reviews) => reviews,
        Err(e) => return err_json(format!("expected a JSON array of strings: {e}")),
    };
    let group = SourceGroup {
        group_id: "demo".into(),
        reviews: reviews
            .into_iter()
            .enumerate()
            .map(|(i, text)| SourceReview { review_id: format!("r{i}"), text })
            .collect(),
    };
    let budget = if budget == 0 { baselines::default_budget(&group) } else { budget };
    let graph = match baselines::build_sentence_graph(&group, damping) {
        Ok(graph) => graph,
        Err(e) => return err_json(e),
    };
    let summary = match baselines::lexrank(&group, damping, budget) {
        Ok(summary) => summary,
        Err(e) => return err_json(e),
    };
    let mut picked: Vec<String> = baselines::split_sentences(&summary);
    let sentences = graph
        .sentences
        .iter()
        .zip(&graph.centrality)
        .map(|(sentence, &centrality)| {
            let hit = picked.iter().position(|p| p == &sentence.text);
            if let Some(at) = hit {
                picked.remove(at);
            }
            SentenceView {
                text: sentence.text.clone(),
                review: sentence.review,
                centrality,
                picked: hit.is_some(),
            }
        })
        .collect();
    serde_json::to_string(&LexrankView { summary, budget, sentences }).unwrap()
}

#[derive(Serialize)]
struct RougeView {
    rouge1: metrics::RougeScore,
    rouge2: metrics::RougeScore,
    rouge_l: metrics::RougeScore,
    candidate_tokens: Vec<String>,
    reference_tokens: Vec<String>,
}

/// Scores a candidate against one reference and reports R1/R2/RL with the
/// token streams the scores were computed over.
#[wasm_bindgen]
pub fn rouge_report(candidate: &str, reference: &str) -> String {
    let cand = corpus::tokenize(candidate);
    let reference = corpus::tokenize(reference);
    let view = RougeView {
        rouge1: metrics::rouge_n(&cand, &reference, 1),
        rouge2: metrics::rouge_n(&cand, &reference, 2),
        rouge_l: metrics::rouge_l(&cand, &reference),
        candidate_tokens: cand,
        reference_tokens: reference,
    };
    serde_json::to_string(&view).unwrap()
}

#[derive(Serialize)]
struct AnnealPoint {
    step: usize,
    beta_z: f64,
    beta_c: f64,
}

/// Samples the cyclical KL-weight schedule over `steps` training steps.
#[wasm_bindgen]
pub fn anneal_curve(
    cycle_length: usize,
    ramp_fraction: f64,
    beta_max_z: f64,
    beta_max_c: f64,
    steps: usize,
) -> String {
    if cycle_length == 0 || !(0.0..=1.0).contains(&ramp_fraction) || ramp_fraction == 0.0 {
        return err_json("cycle_length must be positive and ramp_fraction in (0, 1]");
    }
    if beta_max_z < 0.0 || beta_max_c < 0.0 {
        return err_json("beta maxima must be nonnegative");
    }
    let schedule = AnnealSchedule { cycle_length, ramp_fraction, beta_max_z, beta_max_c };
    let points: Vec<AnnealPoint> = (0..steps)
        .map(|step| {
            let (beta_z, beta_c) = anneal_beta(step, &schedule);
            AnnealPoint { step, beta_z, beta_c }
        })
        .collect();
    serde_json::to_string(&points).unwrap()
}
