//! Review encoder: shared embedding table plus a unidirectional GRU.
//!
//! The same embedding table feeds the encoder, the decoder input, and the
//! inference networks. PAD embeds as a frozen zero row; PAD positions are
//! skipped entirely during encoding, so padding can never change a hidden
//! state or leak gradient.

use crate::corpus::PAD;
use crate::model::ModelDims;
use crate::ndiff::{GruVars, ParameterStore, Tape, VarId};

pub const EMBEDDINGS: &str = "embeddings";

/// Registers the embedding table and encoder GRU weights.
pub fn register(store: &mut ParameterStore, dims: &ModelDims, rng: &mut impl rand::Rng) {
    store.register_matrix(EMBEDDINGS, dims.vocab, dims.embed, rng);
    store.zero_row(EMBEDDINGS, PAD as usize);
    register_gru(store, "encoder.gru", dims.embed, dims.hidden, rng);
}

pub(crate) fn register_gru(
    store: &mut ParameterStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut impl rand::Rng,
) {
    for gate in ["update", "reset", "candidate"] {
        store.register_matrix(&format!("{prefix}.w_{gate}"), hidden, input, rng);
        store.register_matrix(&format!("{prefix}.u_{gate}"), hidden, hidden, rng);
        store.register_vector(&format!("{prefix}.b_{gate}"), hidden, rng);
    }
}

pub(crate) fn bind_gru(tape: &mut Tape, store: &ParameterStore, prefix: &str) -> GruVars {
    let mut var = |name: String| tape.param(store, &name);
    GruVars {
        w_u: var(format!("{prefix}.w_update")),
        u_u: var(format!("{prefix}.u_update")),
        b_u: var(format!("{prefix}.b_update")),
        w_r: var(format!("{prefix}.w_reset")),
        u_r: var(format!("{prefix}.u_reset")),
        b_r: var(format!("{prefix}.b_reset")),
        w_n: var(format!("{prefix}.w_candidate")),
        u_n: var(format!("{prefix}.u_candidate")),
        b_n: var(format!("{prefix}.b_candidate")),
    }
}

/// Tape bindings for the encoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub embeddings: VarId,
    pub gru: GruVars,
    pub hidden_dim: usize,
}

pub fn bind(tape: &mut Tape, store: &ParameterStore, dims: &ModelDims) -> EncoderVars {
    EncoderVars {
        embeddings: tape.param(store, EMBEDDINGS),
        gru: bind_gru(tape, store, "encoder.gru"),
        hidden_dim: dims.hidden,
    }
}

/// Per-position tape nodes for one encoded review.
#[derive(Debug, Clone)]
pub struct EncodedReview {
    /// Word embeddings w_t, content positions only.
    pub embeds: Vec<VarId>,
    /// GRU hidden states h_t.
    pub hidden: Vec<VarId>,
    /// Concatenations m_t = [h_t ∘ w_t].
    pub concat: Vec<VarId>,
    /// The last hidden state h_T.
    pub final_state: VarId,
}

impl EncodedReview {
    /// Content token count T.
    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

/// Embedding lookup; the id must be below the fixed vocabulary size.
pub fn embed(tape: &mut Tape, vars: &EncoderVars, id: u32) -> VarId {
    let table_rows = tape.value(vars.embeddings).rows();
    assert!((id as usize) < table_rows, "token id {id} outside the embedding table");
    tape.row(vars.embeddings, id as usize)
}

/// Runs the GRU over the review's content tokens (h_0 = 0). PAD ids are
/// skipped: the previous state carries forward and the position contributes
/// nothing, so padded and unpadded inputs encode identically.
pub fn encode_review(tape: &mut Tape, vars: &EncoderVars, token_ids: &[u32]) -> EncodedReview {
    let content: Vec<u32> = token_ids.iter().copied().filter(|&id| id != PAD).collect();
    assert!(!content.is_empty(), "cannot encode an empty review");
    let mut h = tape.constant(crate::ndiff::Tensor::zeros(vec![vars.hidden_dim]));
    let mut encoded = EncodedReview {
        embeds: Vec::with_capacity(content.len()),
        hidden: Vec::with_capacity(content.len()),
        concat: Vec::with_capacity(content.len()),
        final_state: h,
    };
    for id in content {
        let w = embed(tape, vars, id);
        h = tape.gru_cell(&vars.gru, w, h);
        let m = tape.concat(&[h, w]);
        encoded.embeds.push(w);
        encoded.hidden.push(h);
        encoded.concat.push(m);
    }
    encoded.final_state = *encoded.hidden.last().unwrap();
    encoded
}
