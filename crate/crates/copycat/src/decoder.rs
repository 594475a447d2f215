//! Autoregressive GRU decoder with additive attention over the other
//! reviews' encoder states and a pointer-generator output layer.
//!
//! Each step consumes [w_t ∘ ctx_{t−1} ∘ z], updates the GRU state, attends
//! over the copy source, and mixes a fixed-vocabulary softmax with the
//! attention-derived copy distribution: P(w) = p_gen·P_vocab + (1−p_gen)·P_copy.

use std::rc::Rc;

use crate::encoder::{self, EncodedReview, EncoderVars};
use crate::model::{Ablation, ModelDims};
use crate::ndiff::{FfnnVars, ParameterStore, Tape, Tensor, VarId};

/// Probabilities below this are floored before the log; keeps the objective
/// finite when a target token is unreachable.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tape bindings for the decoder parameters.
pub struct DecoderVars {
    pub gru: crate::ndiff::GruVars,
    init_w: VarId,
    init_b: VarId,
    attn: Option<FfnnVars>,
    copy: Option<FfnnVars>,
    out_w: VarId,
    out_b: VarId,
    hidden_dim: usize,
}

pub fn register(
    store: &mut ParameterStore,
    dims: &ModelDims,
    ablation: Ablation,
    rng: &mut impl rand::Rng,
) {
    store.register_matrix("decoder.init.w", dims.hidden, dims.latent, rng);
    store.register_vector("decoder.init.b", dims.hidden, rng);
    let input_dim =
        dims.embed + dims.hidden + if ablation.uses_z() { dims.latent } else { 0 };
    encoder::register_gru(store, "decoder.gru", input_dim, dims.hidden, rng);
    if ablation.uses_attention() {
        store.register_matrix("decoder.attn.w1", dims.attn_hidden, 2 * dims.hidden, rng);
        store.register_vector("decoder.attn.b1", dims.attn_hidden, rng);
        store.register_matrix("decoder.attn.w2", 1, dims.attn_hidden, rng);
        store.register_vector("decoder.attn.b2", 1, rng);
        store.register_matrix("decoder.copy.w1", dims.copy_hidden, 2 * dims.hidden + dims.embed, rng);
        store.register_vector("decoder.copy.b1", dims.copy_hidden, rng);
        store.register_matrix("decoder.copy.w2", 1, dims.copy_hidden, rng);
        store.register_vector("decoder.copy.b2", 1, rng);
    }
    store.register_matrix("decoder.out.w", dims.vocab, 2 * dims.hidden, rng);
    store.register_vector("decoder.out.b", dims.vocab, rng);
}

pub fn bind(
    tape: &mut Tape,
    store: &ParameterStore,
    dims: &ModelDims,
    ablation: Ablation,
) -> DecoderVars {
    DecoderVars {
        gru: encoder::bind_gru(tape, store, "decoder.gru"),
        init_w: tape.param(store, "decoder.init.w"),
        init_b: tape.param(store, "decoder.init.b"),
        attn: ablation
            .uses_attention()
            .then(|| crate::latent::bind_ffnn(tape, store, "decoder.attn")),
        copy: ablation
            .uses_attention()
            .then(|| crate::latent::bind_ffnn(tape, store, "decoder.copy")),
        out_w: tape.param(store, "decoder.out.w"),
        out_b: tape.param(store, "decoder.out.b"),
        hidden_dim: dims.hidden,
    }
}

/// What the decoder may copy from: encoder states of the source reviews with
/// their extended ids and original (review, position) coordinates.
#[derive(Debug, Clone)]
pub struct CopySource {
    pub states: Vec<VarId>,
    pub ext_ids: Rc<Vec<usize>>,
    pub origins: Vec<(usize, usize)>,
}

impl CopySource {
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Collects the copy source over all encoded reviews except `exclude` (the
/// review currently being reconstructed attends to the others only).
pub fn copy_source(
    encoded: &[EncodedReview],
    ext_ids: &[&[u32]],
    exclude: Option<usize>,
) -> CopySource {
    assert_eq!(encoded.len(), ext_ids.len());
    let mut source =
        CopySource { states: Vec::new(), ext_ids: Rc::new(Vec::new()), origins: Vec::new() };
    let ids = Rc::get_mut(&mut source.ext_ids).unwrap();
    for (i, (review, review_ids)) in encoded.iter().zip(ext_ids).enumerate() {
        if Some(i) == exclude {
            continue;
        }
        assert_eq!(review.len(), review_ids.len(), "encoder/id length mismatch");
        for (t, (&h, &id)) in review.hidden.iter().zip(review_ids.iter()).enumerate() {
            source.states.push(h);
            ids.push(id as usize);
            source.origins.push((i, t));
        }
    }
    source
}

/// Rolling decoder state.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub hidden: VarId,
    /// Context from the previous step's attention; zero at t = 0.
    pub ctx: VarId,
    /// The review code fed into every GRU step; absent under the no-z wiring.
    pub z: Option<VarId>,
}

/// s_0 = tanh(affine(code)), ctx_0 = 0.
pub fn initial_state(
    tape: &mut Tape,
    vars: &DecoderVars,
    code: VarId,
    z: Option<VarId>,
) -> DecoderState {
    let pre = tape.affine(vars.init_w, vars.init_b, code);
    let hidden = tape.tanh(pre);
    let ctx = tape.constant(Tensor::zeros(vec![vars.hidden_dim]));
    DecoderState { hidden, ctx, z }
}

/// Additive attention: score_j = ffnn_tanh([query ∘ h_j]), softmax over
/// source positions, context = Σ weight_j · h_j.
pub fn attend(
    tape: &mut Tape,
    attn: &FfnnVars,
    query: VarId,
    states: &[VarId],
) -> (VarId, VarId) {
    assert!(!states.is_empty(), "attention needs at least one source position");
    let scores: Vec<VarId> = states
        .iter()
        .map(|&h| {
            let pair = tape.concat(&[query, h]);
            tape.ffnn_tanh(attn, pair)
        })
        .collect();
    let stacked = tape.concat(&scores);
    let weights = tape.softmax(stacked, None);
    let ctx = tape.weighted_sum(weights, states);
    (ctx, weights)
}

/// One GRU step followed by attention for the next step's context. Returns
/// the new state and this step's attention weights (None when attention is
/// ablated; the context stays pinned at zero).
pub fn decode_step(
    tape: &mut Tape,
    vars: &DecoderVars,
    state: &DecoderState,
    w: VarId,
    source: Option<&CopySource>,
) -> (DecoderState, Option<VarId>) {
    let x = match state.z {
        Some(z) => tape.concat(&[w, state.ctx, z]),
        None => tape.concat(&[w, state.ctx]),
    };
    let hidden = tape.gru_cell(&vars.gru, x, state.hidden);
    let (ctx, weights) = match (&vars.attn, source) {
        (Some(attn), Some(source)) if !source.is_empty() => {
            let (ctx, weights) = attend(tape, attn, hidden, &source.states);
            (ctx, Some(weights))
        }
        _ => (tape.constant(Tensor::zeros(vec![vars.hidden_dim])), None),
    };
    (DecoderState { hidden, ctx, z: state.z }, weights)
}

impl DecoderVars {
    pub fn attn_vars(&self) -> Option<FfnnVars> {
        self.attn
    }

    pub fn copy_vars(&self) -> Option<FfnnVars> {
        self.copy
    }
}

/// p_gen = σ(ffnn_tanh([s ∘ ctx ∘ w])), a length-1 node.
pub fn copy_gate(
    tape: &mut Tape,
    copy: &FfnnVars,
    hidden: VarId,
    ctx: VarId,
    w: VarId,
) -> VarId {
    let input = tape.concat(&[hidden, ctx, w]);
    let pre = tape.ffnn_tanh(copy, input);
    tape.sigmoid(pre)
}

/// P_vocab: softmax over the fixed vocabulary from [s ∘ ctx].
pub fn vocab_distribution(
    tape: &mut Tape,
    vars: &DecoderVars,
    hidden: VarId,
    ctx: VarId,
) -> VarId {
    let features = tape.concat(&[hidden, ctx]);
    let logits = tape.affine(vars.out_w, vars.out_b, features);
    tape.softmax(logits, None)
}

/// The extended-vocabulary mixture
/// P(w) = p_gen·P_vocab(w) + (1−p_gen)·P_copy(w), a vector of `ext_size`
/// probabilities. Without attention the copy path is off and the
/// distribution is P_vocab padded with zeros.
pub fn output_distribution(
    tape: &mut Tape,
    vars: &DecoderVars,
    hidden: VarId,
    ctx: VarId,
    attention: Option<VarId>,
    p_gen: Option<VarId>,
    source: Option<&CopySource>,
    ext_size: usize,
) -> VarId {
    let p_vocab = vocab_distribution(tape, vars, hidden, ctx);
    let padded = tape.pad_to(p_vocab, ext_size);
    match (attention, p_gen, source) {
        (Some(weights), Some(p_gen), Some(source)) if !source.is_empty() => {
            let p_copy = tape.scatter_add(weights, Rc::clone(&source.ext_ids), ext_size);
            let gen_part = tape.scale_by(p_gen, padded);
            let keep_copy = tape.affine_const(p_gen, -1.0, 1.0);
            let copy_part = tape.scale_by(keep_copy, p_copy);
            tape.add(gen_part, copy_part)
        }
        _ => padded,
    }
}

/// Builds teacher-forcing sequences: inputs are BOS followed by the
/// fixed-vocab ids (OOV feeds back as UNK), targets are the extended ids
/// followed by EOS.
pub fn teacher_sequences(review: &crate::corpus::Review) -> (Vec<u32>, Vec<u32>) {
    let mut inputs = Vec::with_capacity(review.len() + 1);
    inputs.push(crate::corpus::BOS);
    inputs.extend_from_slice(&review.token_ids);
    let mut targets = review.extended_ids.clone();
    targets.push(crate::corpus::EOS);
    (inputs, targets)
}

/// Teacher-forced log p(r | code, source): the sum over steps of the floored
/// log-probability of each target extended id.
#[allow(clippy::too_many_arguments)]
pub fn review_log_likelihood(
    tape: &mut Tape,
    enc_vars: &EncoderVars,
    dec_vars: &DecoderVars,
    seed_code: VarId,
    z_input: Option<VarId>,
    input_ids: &[u32],
    target_ids: &[u32],
    source: Option<&CopySource>,
    ext_size: usize,
) -> VarId {
    assert_eq!(input_ids.len(), target_ids.len());
    assert!(!input_ids.is_empty(), "a review must end with EOS");
    let mut state = initial_state(tape, dec_vars, seed_code, z_input);
    let mut total: Option<VarId> = None;
    for (&input, &target) in input_ids.iter().zip(target_ids) {
        let w = encoder::embed(tape, enc_vars, input);
        let (next, attention) = decode_step(tape, dec_vars, &state, w, source);
        let p_gen = match (&dec_vars.copy, attention) {
            (Some(copy), Some(_)) => Some(copy_gate(tape, copy, next.hidden, next.ctx, w)),
            _ => None,
        };
        let probs = output_distribution(
            tape,
            dec_vars,
            next.hidden,
            next.ctx,
            attention,
            p_gen,
            source,
            ext_size,
        );
        let p_target = tape.at(probs, target as usize);
        let log_p = tape.ln_floored(p_target, PROB_FLOOR);
        total = Some(match total {
            Some(acc) => tape.add(acc, log_p),
            None => log_p,
        });
        state = next;
    }
    total.unwrap()
}
