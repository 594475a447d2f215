//! Summary generation: decode from the group's mean latent codes with
//! length-normalized beam search, recording which tokens came through the
//! copy path.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, GroupRecord, OovTable, Vocabulary, BOS, EOS, UNK};
use crate::decoder::{self, CopySource, DecoderState, DecoderVars, PROB_FLOOR};
use crate::encoder::{self, EncodedReview, EncoderVars};
use crate::latent;
use crate::model::{self, Checkpoint, ModelConfig};
use crate::ndiff::{NdiffError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("no summaries to aggregate")]
    EmptyResults,
    #[error("group {group_id:?} has no reviews")]
    EmptyGroup { group_id: String },
    #[error(transparent)]
    Checkpoint(#[from] NdiffError),
}

/// How the latent codes are chosen at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// c = posterior mean, z = prior mean given c.
    #[default]
    Mean,
    /// c sampled from the posterior, z sampled from the prior given c.
    Sample,
}

impl fmt::Display for GenerationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GenerationMode::Mean => "mean",
            GenerationMode::Sample => "sample",
        })
    }
}

impl FromStr for GenerationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(GenerationMode::Mean),
            "sample" => Ok(GenerationMode::Sample),
            other => Err(format!("unknown generation mode {other:?}; expected mean or sample")),
        }
    }
}

/// A (possibly partial) decoded candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Emitted extended ids; ends with EOS exactly when finished.
    pub token_ids: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Plain logprob/length; the length counts every emitted token, EOS
    /// included.
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.token_ids.len().max(1) as f64
    }
}

/// One autoregressive step of some sequence model: feed the previous token,
/// get the next-token distribution over extended ids.
pub trait SequenceModel {
    type State: Clone;

    fn initial_state(&self) -> Self::State;
    fn step(&mut self, state: &Self::State, input: u32) -> (Self::State, Vec<f64>);
}

fn better(a: &BeamHypothesis, b: &BeamHypothesis) -> std::cmp::Ordering {
    b.normalized_score()
        .total_cmp(&a.normalized_score())
        .then_with(|| a.token_ids.cmp(&b.token_ids))
}

/// Length-normalized beam search. Finished hypotheses are set aside as they
/// appear; the result maximizes logprob/length over them (over the surviving
/// max-length candidates if nothing finished). Ties break toward the
/// lexicographically smaller id sequence, so the search is deterministic.
pub fn beam_search<M: SequenceModel>(
    model: &mut M,
    bos: u32,
    eos: u32,
    width: usize,
    max_len: usize,
) -> BeamHypothesis {
    assert!(width >= 1, "beam width must be positive");
    assert!(max_len >= 1, "max length must be positive");
    let start = BeamHypothesis { token_ids: Vec::new(), log_prob: 0.0, finished: false };
    let mut live = vec![(model.initial_state(), start)];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(M::State, BeamHypothesis)> = Vec::new();
        for (state, hyp) in &live {
            let input = hyp.token_ids.last().copied().unwrap_or(bos);
            let (next_state, probs) = model.step(state, input);
            for (id, &p) in probs.iter().enumerate() {
                let mut token_ids = hyp.token_ids.clone();
                token_ids.push(id as u32);
                candidates.push((
                    next_state.clone(),
                    BeamHypothesis {
                        token_ids,
                        log_prob: hyp.log_prob + p.max(PROB_FLOOR).ln(),
                        finished: id as u32 == eos,
                    },
                ));
            }
        }
        candidates.sort_by(|(_, a), (_, b)| {
            b.log_prob.total_cmp(&a.log_prob).then_with(|| a.token_ids.cmp(&b.token_ids))
        });
        candidates.truncate(width);
        live.clear();
        for (state, hyp) in candidates {
            if hyp.finished {
                finished.push(hyp);
            } else {
                live.push((state, hyp));
            }
        }
        if live.is_empty() {
            break;
        }
    }
    let mut pool = if finished.is_empty() {
        live.into_iter().map(|(_, hyp)| hyp).collect()
    } else {
        finished
    };
    pool.sort_by(better);
    pool.into_iter().next().expect("beam search always yields a candidate")
}

/// A token the decoder took from the inputs rather than the vocabulary
/// softmax.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopiedToken {
    pub token: String,
    /// Index of the source review within the group.
    pub review: usize,
    /// Token position within that review.
    pub position: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryResult {
    pub group_id: String,
    pub summary: String,
    #[serde(skip)]
    pub token_ids: Vec<u32>,
    pub copied: Vec<CopiedToken>,
    pub mode: GenerationMode,
}

#[derive(Debug, Clone, Copy)]
pub struct SummarizeOptions {
    pub mode: GenerationMode,
    pub seed: u64,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for SummarizeOptions {
    fn default() -> Self {
        SummarizeOptions { mode: GenerationMode::Mean, seed: 0, beam_width: 5, max_len: 80 }
    }
}

/// The decoder wrapped as a `SequenceModel` over one group's copy source.
struct GroupDecoder {
    tape: Tape,
    enc_vars: EncoderVars,
    dec_vars: DecoderVars,
    source: Option<CopySource>,
    vocab_size: usize,
    ext_size: usize,
    init: DecoderState,
}

/// Everything observable about one decoding step, for provenance replay.
struct StepDetail {
    state: DecoderState,
    probs: Vec<f64>,
    p_gen: Option<f64>,
    attention: Option<Vec<f64>>,
    p_vocab: Vec<f64>,
}

impl GroupDecoder {
    fn step_detail(&mut self, state: &DecoderState, input: u32) -> StepDetail {
        let fed = if (input as usize) < self.vocab_size { input } else { UNK };
        let w = encoder::embed(&mut self.tape, &self.enc_vars, fed);
        let (next, attention) =
            decoder::decode_step(&mut self.tape, &self.dec_vars, state, w, self.source.as_ref());
        let p_gen = match (self.dec_vars.copy_vars(), attention) {
            (Some(copy), Some(_)) => {
                Some(decoder::copy_gate(&mut self.tape, &copy, next.hidden, next.ctx, w))
            }
            _ => None,
        };
        let p_vocab =
            decoder::vocab_distribution(&mut self.tape, &self.dec_vars, next.hidden, next.ctx);
        let probs = decoder::output_distribution(
            &mut self.tape,
            &self.dec_vars,
            next.hidden,
            next.ctx,
            attention,
            p_gen,
            self.source.as_ref(),
            self.ext_size,
        );
        StepDetail {
            state: next,
            probs: self.tape.value(probs).data().to_vec(),
            p_gen: p_gen.map(|id| self.tape.value(id).item()),
            attention: attention.map(|id| self.tape.value(id).data().to_vec()),
            p_vocab: self.tape.value(p_vocab).data().to_vec(),
        }
    }
}

impl SequenceModel for GroupDecoder {
    type State = DecoderState;

    fn initial_state(&self) -> DecoderState {
        self.init
    }

    fn step(&mut self, state: &DecoderState, input: u32) -> (DecoderState, Vec<f64>) {
        let detail = self.step_detail(state, input);
        (detail.state, detail.probs)
    }
}

/// Loads a checkpoint and turns review groups into summaries.
pub struct Summarizer {
    checkpoint: Checkpoint,
}

impl Summarizer {
    pub fn new(checkpoint: Checkpoint) -> Self {
        Summarizer { checkpoint }
    }

    pub fn from_path(path: &Path) -> Result<Self, GenerateError> {
        Ok(Summarizer::new(Checkpoint::load(path)?))
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.checkpoint.vocab
    }

    pub fn config(&self) -> &ModelConfig {
        &self.checkpoint.config
    }

    /// Summarizes one group: encode all reviews, pick latent codes per the
    /// mode, beam-search a summary attending over the whole group, then
    /// replay the chosen sequence to record copy provenance.
    pub fn summarize(
        &self,
        record: &GroupRecord,
        opts: &SummarizeOptions,
    ) -> Result<SummaryResult, GenerateError> {
        if record.reviews.is_empty() {
            return Err(GenerateError::EmptyGroup { group_id: record.group_id.clone() });
        }
        let config = self.checkpoint.config;
        let ablation = config.ablation;
        let vocab = &self.checkpoint.vocab;
        let (group, oov) = corpus::make_eval_group(record, vocab);
        let ext_size = vocab.size() + oov.len();

        let mut tape = Tape::new();
        let vars = model::bind(&mut tape, &self.checkpoint.store, &config);
        let encoded: Vec<EncodedReview> = group
            .reviews
            .iter()
            .map(|r| encoder::encode_review(&mut tape, &vars.encoder, &r.token_ids))
            .collect();

        let mut noise_rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(&mut noise_rng)).collect()
        };
        let latent_dim = config.dims.latent;

        let c = if ablation.uses_c() {
            let (q_c, _) = latent::infer_group_posterior(&mut tape, &vars.latent, &encoded);
            Some(match opts.mode {
                GenerationMode::Mean => q_c.mean,
                GenerationMode::Sample => {
                    latent::reparameterize(&mut tape, &q_c, &draw(latent_dim))
                }
            })
        } else {
            None
        };
        let (seed_code, z_input) = if ablation.uses_z() {
            let z = if ablation.uses_c() {
                let p_z = latent::prior_z(&mut tape, &vars.latent, c);
                match opts.mode {
                    GenerationMode::Mean => p_z.mean,
                    GenerationMode::Sample => {
                        latent::reparameterize(&mut tape, &p_z, &draw(latent_dim))
                    }
                }
            } else {
                match opts.mode {
                    // Without the group variable there is no informative
                    // prior; the consensus code is the average of the
                    // per-review posterior means.
                    GenerationMode::Mean => {
                        let means: Vec<_> = encoded
                            .iter()
                            .map(|r| {
                                latent::infer_review_posterior(
                                    &mut tape,
                                    &vars.latent,
                                    r.final_state,
                                    None,
                                )
                                .mean
                            })
                            .collect();
                        let uniform = tape.constant(Tensor::vector(vec![
                            1.0 / means.len() as f64;
                            means.len()
                        ]));
                        tape.weighted_sum(uniform, &means)
                    }
                    GenerationMode::Sample => {
                        let prior = latent::prior_standard(&mut tape, latent_dim);
                        latent::reparameterize(&mut tape, &prior, &draw(latent_dim))
                    }
                }
            };
            (z, Some(z))
        } else {
            (c.expect("the no-z wiring keeps the group variable"), None)
        };

        let ext_ids: Vec<&[u32]> =
            group.reviews.iter().map(|r| r.extended_ids.as_slice()).collect();
        let source =
            ablation.uses_attention().then(|| decoder::copy_source(&encoded, &ext_ids, None));
        let init = decoder::initial_state(&mut tape, &vars.decoder, seed_code, z_input);
        let mut model = GroupDecoder {
            tape,
            enc_vars: vars.encoder,
            dec_vars: vars.decoder,
            source,
            vocab_size: vocab.size(),
            ext_size,
            init,
        };
        let best =
            beam_search(&mut model, BOS, EOS, opts.beam_width, opts.max_len);

        let emitted: Vec<u32> = best
            .token_ids
            .iter()
            .copied()
            .filter(|&id| id != EOS)
            .collect();
        let copied = replay_provenance(&mut model, &best.token_ids, vocab, &oov);
        let surface: Vec<String> = emitted
            .iter()
            .map(|&id| resolve_token(id, vocab, &oov))
            .collect();
        Ok(SummaryResult {
            group_id: record.group_id.clone(),
            summary: corpus::detokenize(&surface),
            token_ids: emitted,
            copied,
            mode: opts.mode,
        })
    }
}

fn resolve_token(id: u32, vocab: &Vocabulary, oov: &OovTable) -> String {
    if (id as usize) < vocab.size() {
        vocab.token(id).to_string()
    } else {
        oov.resolve(id).unwrap_or("<unk>").to_string()
    }
}

/// Replays the chosen sequence step by step; a token is recorded as copied
/// when the copy side of the mixture outweighs the generation side, and its
/// source is the attention argmax among positions holding that id.
fn replay_provenance(
    model: &mut GroupDecoder,
    token_ids: &[u32],
    vocab: &Vocabulary,
    oov: &OovTable,
) -> Vec<CopiedToken> {
    let Some(source) = model.source.clone() else {
        return Vec::new();
    };
    let mut copied = Vec::new();
    let mut state = model.initial_state();
    let mut input = BOS;
    for &token in token_ids {
        let detail = model.step_detail(&state, input);
        if let (Some(p_gen), Some(attention)) = (detail.p_gen, &detail.attention) {
            let copy_mass: f64 = source
                .ext_ids
                .iter()
                .zip(attention)
                .filter(|(&id, _)| id == token as usize)
                .map(|(_, &w)| w)
                .sum();
            let vocab_mass = if (token as usize) < vocab.size() {
                detail.p_vocab.get(token as usize).copied().unwrap_or(0.0)
            } else {
                0.0
            };
            if (1.0 - p_gen) * copy_mass > p_gen * vocab_mass && token != EOS {
                let best = source
                    .ext_ids
                    .iter()
                    .zip(attention)
                    .enumerate()
                    .filter(|(_, (&id, _))| id == token as usize)
                    .max_by(|(_, (_, a)), (_, (_, b))| a.total_cmp(b));
                if let Some((idx, _)) = best {
                    let (review, position) = source.origins[idx];
                    copied.push(CopiedToken {
                        token: resolve_token(token, vocab, oov),
                        review,
                        position,
                    });
                }
            }
        }
        state = detail.state;
        input = token;
    }
    copied
}

/// Mean copied tokens per summary plus a frequency table (count desc,
/// surface asc).
pub fn copy_statistics(
    results: &[SummaryResult],
) -> Result<(f64, Vec<(String, usize)>), GenerateError> {
    if results.is_empty() {
        return Err(GenerateError::EmptyResults);
    }
    let total: usize = results.iter().map(|r| r.copied.len()).sum();
    let mut counts = std::collections::BTreeMap::new();
    for result in results {
        for record in &result.copied {
            *counts.entry(record.token.clone()).or_insert(0usize) += 1;
        }
    }
    let mut table: Vec<(String, usize)> = counts.into_iter().collect();
    table.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    Ok((total as f64 / results.len() as f64, table))
}
