//! Gaussian machinery: the group posterior q(c|r_1..N), the review prior
//! p(z|c) and posterior q(z|r,c), closed-form KL, and reparameterized
//! sampling. Everything is diagonal and parameterized by log-variance.

use crate::encoder::EncodedReview;
use crate::model::{Ablation, ModelDims};
use crate::ndiff::{FfnnVars, ParameterStore, Tape, Tensor, VarId};

/// A diagonal Gaussian as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct DiagGaussian {
    pub mean: VarId,
    pub log_var: VarId,
}

/// The α attention over every content word of the group, kept for
/// inspection and tests.
#[derive(Debug, Clone)]
pub struct GroupPosteriorTrace {
    /// Softmax weights, one per word, flattened in (review, position) order.
    pub alpha: VarId,
    /// ĥ = Σ α·m.
    pub pooled: VarId,
    /// (review index, position) for each α entry.
    pub positions: Vec<(usize, usize)>,
}

struct AffineHead {
    w: VarId,
    b: VarId,
}

/// Tape bindings for the latent parameters; absent heads reflect the
/// ablation wiring.
pub struct LatentVars {
    alpha: Option<FfnnVars>,
    c_mean: Option<AffineHead>,
    c_log_var: Option<AffineHead>,
    z_prior_mean: Option<AffineHead>,
    z_prior_log_var: Option<AffineHead>,
    z_post_mean: Option<AffineHead>,
    z_post_log_var: Option<AffineHead>,
    latent_dim: usize,
}

fn register_head(
    store: &mut ParameterStore,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    rng: &mut impl rand::Rng,
) {
    store.register_matrix(&format!("{name}.w"), out_dim, in_dim, rng);
    store.register_vector(&format!("{name}.b"), out_dim, rng);
}

fn bind_head(tape: &mut Tape, store: &ParameterStore, name: &str) -> AffineHead {
    AffineHead { w: tape.param(store, &format!("{name}.w")), b: tape.param(store, &format!("{name}.b")) }
}

fn register_ffnn(
    store: &mut ParameterStore,
    name: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut impl rand::Rng,
) {
    store.register_matrix(&format!("{name}.w1"), hidden, in_dim, rng);
    store.register_vector(&format!("{name}.b1"), hidden, rng);
    store.register_matrix(&format!("{name}.w2"), out_dim, hidden, rng);
    store.register_vector(&format!("{name}.b2"), out_dim, rng);
}

pub(crate) fn bind_ffnn(tape: &mut Tape, store: &ParameterStore, name: &str) -> FfnnVars {
    FfnnVars {
        w1: tape.param(store, &format!("{name}.w1")),
        b1: tape.param(store, &format!("{name}.b1")),
        w2: tape.param(store, &format!("{name}.w2")),
        b2: tape.param(store, &format!("{name}.b2")),
    }
}

pub fn register(
    store: &mut ParameterStore,
    dims: &ModelDims,
    ablation: Ablation,
    rng: &mut impl rand::Rng,
) {
    let m_dim = dims.hidden + dims.embed;
    if ablation.uses_c() {
        register_ffnn(store, "latent.alpha", m_dim, dims.alpha_hidden, 1, rng);
        register_head(store, "latent.c_post.mean", dims.latent, m_dim, rng);
        register_head(store, "latent.c_post.log_var", dims.latent, m_dim, rng);
    }
    if ablation.uses_z() {
        if ablation.uses_c() {
            register_head(store, "latent.z_prior.mean", dims.latent, dims.latent, rng);
            register_head(store, "latent.z_prior.log_var", dims.latent, dims.latent, rng);
        }
        let post_in = if ablation.uses_c() { dims.hidden + dims.latent } else { dims.hidden };
        register_head(store, "latent.z_post.mean", dims.latent, post_in, rng);
        register_head(store, "latent.z_post.log_var", dims.latent, post_in, rng);
    }
}

pub fn bind(
    tape: &mut Tape,
    store: &ParameterStore,
    dims: &ModelDims,
    ablation: Ablation,
) -> LatentVars {
    let mut vars = LatentVars {
        alpha: None,
        c_mean: None,
        c_log_var: None,
        z_prior_mean: None,
        z_prior_log_var: None,
        z_post_mean: None,
        z_post_log_var: None,
        latent_dim: dims.latent,
    };
    if ablation.uses_c() {
        vars.alpha = Some(bind_ffnn(tape, store, "latent.alpha"));
        vars.c_mean = Some(bind_head(tape, store, "latent.c_post.mean"));
        vars.c_log_var = Some(bind_head(tape, store, "latent.c_post.log_var"));
    }
    if ablation.uses_z() {
        if ablation.uses_c() {
            vars.z_prior_mean = Some(bind_head(tape, store, "latent.z_prior.mean"));
            vars.z_prior_log_var = Some(bind_head(tape, store, "latent.z_prior.log_var"));
        }
        vars.z_post_mean = Some(bind_head(tape, store, "latent.z_post.mean"));
        vars.z_post_log_var = Some(bind_head(tape, store, "latent.z_post.log_var"));
    }
    vars
}

/// The standard-normal prior N(0, I).
pub fn prior_standard(tape: &mut Tape, dim: usize) -> DiagGaussian {
    DiagGaussian {
        mean: tape.constant(Tensor::zeros(vec![dim])),
        log_var: tape.constant(Tensor::zeros(vec![dim])),
    }
}

/// q(c | r_1..N): a tanh scorer rates every word's concatenation m_t, a
/// group-wide softmax pools them, and two affine heads read off the Gaussian.
pub fn infer_group_posterior(
    tape: &mut Tape,
    vars: &LatentVars,
    encoded: &[EncodedReview],
) -> (DiagGaussian, GroupPosteriorTrace) {
    let scorer = vars.alpha.as_ref().expect("group posterior disabled by ablation");
    let mut scores = Vec::new();
    let mut items = Vec::new();
    let mut positions = Vec::new();
    for (i, review) in encoded.iter().enumerate() {
        for (t, &m) in review.concat.iter().enumerate() {
            scores.push(tape.ffnn_tanh(scorer, m));
            items.push(m);
            positions.push((i, t));
        }
    }
    assert!(!scores.is_empty(), "no content words to pool over");
    let stacked = tape.concat(&scores);
    let alpha = tape.softmax(stacked, None);
    let pooled = tape.weighted_sum(alpha, &items);
    let mean_head = vars.c_mean.as_ref().unwrap();
    let log_var_head = vars.c_log_var.as_ref().unwrap();
    let gaussian = DiagGaussian {
        mean: tape.affine(mean_head.w, mean_head.b, pooled),
        log_var: tape.affine(log_var_head.w, log_var_head.b, pooled),
    };
    (gaussian, GroupPosteriorTrace { alpha, pooled, positions })
}

/// p(z | c): two affine heads of the group code. Under the no-c wiring the
/// prior falls back to N(0, I).
pub fn prior_z(tape: &mut Tape, vars: &LatentVars, c: Option<VarId>) -> DiagGaussian {
    match (c, &vars.z_prior_mean, &vars.z_prior_log_var) {
        (Some(c), Some(mean), Some(log_var)) => DiagGaussian {
            mean: tape.affine(mean.w, mean.b, c),
            log_var: tape.affine(log_var.w, log_var.b, c),
        },
        _ => prior_standard(tape, vars.latent_dim),
    }
}

/// q(z | r, c): affine heads of [h_T ∘ c] (of h_T alone without c).
pub fn infer_review_posterior(
    tape: &mut Tape,
    vars: &LatentVars,
    h_last: VarId,
    c: Option<VarId>,
) -> DiagGaussian {
    let mean_head = vars.z_post_mean.as_ref().expect("review posterior disabled by ablation");
    let log_var_head = vars.z_post_log_var.as_ref().unwrap();
    let input = match c {
        Some(c) => tape.concat(&[h_last, c]),
        None => h_last,
    };
    DiagGaussian {
        mean: tape.affine(mean_head.w, mean_head.b, input),
        log_var: tape.affine(log_var_head.w, log_var_head.b, input),
    }
}

/// Closed-form KL(q ‖ p) for diagonal Gaussians:
/// Σ_d ½·((σq² + (μq−μp)²)/σp² − 1 + ln σp² − ln σq²).
pub fn kl_divergence(tape: &mut Tape, q: &DiagGaussian, p: &DiagGaussian) -> VarId {
    let dim = tape.value(q.mean).len();
    assert_eq!(dim, tape.value(p.mean).len(), "KL dimension mismatch");
    let d_log_var = tape.sub(q.log_var, p.log_var);
    let var_ratio = tape.exp(d_log_var);
    let ratio_sum = tape.sum(var_ratio);
    let d_mean = tape.sub(q.mean, p.mean);
    let d_mean_sq = tape.mul(d_mean, d_mean);
    let neg_p_log_var = tape.affine_const(p.log_var, -1.0, 0.0);
    let inv_p_var = tape.exp(neg_p_log_var);
    let mahalanobis = tape.mul(d_mean_sq, inv_p_var);
    let mahalanobis_sum = tape.sum(mahalanobis);
    let p_lv_sum = tape.sum(p.log_var);
    let q_lv_sum = tape.sum(q.log_var);
    let lv_diff = tape.sub(p_lv_sum, q_lv_sum);
    let partial = tape.add(ratio_sum, mahalanobis_sum);
    let total = tape.add(partial, lv_diff);
    tape.affine_const(total, 0.5, -0.5 * dim as f64)
}

/// μ + exp(½·log σ²) ⊙ ε for a fixed standard-normal draw ε.
pub fn reparameterize(tape: &mut Tape, g: &DiagGaussian, noise: &[f64]) -> VarId {
    assert_eq!(tape.value(g.mean).len(), noise.len(), "noise dimension mismatch");
    let std = tape.affine_const(g.log_var, 0.5, 0.0);
    let std = tape.exp(std);
    let eps = tape.constant(Tensor::vector(noise.to_vec()));
    let scaled = tape.mul(std, eps);
    tape.add(g.mean, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(tape: &mut Tape, mean: Vec<f64>, log_var: Vec<f64>) -> DiagGaussian {
        DiagGaussian {
            mean: tape.constant(Tensor::vector(mean)),
            log_var: tape.constant(Tensor::vector(log_var)),
        }
    }

    #[test]
    fn standard_prior_is_zero_mean_unit_variance() {
        let mut tape = Tape::new();
        let p = prior_standard(&mut tape, 3);
        assert_eq!(tape.value(p.mean).data(), &[0.0; 3]);
        assert_eq!(tape.value(p.log_var).data(), &[0.0; 3]);
        let q = prior_standard(&mut tape, 3);
        let kl = kl_divergence(&mut tape, &q, &p);
        assert_eq!(tape.value(kl).item(), 0.0);
    }

    #[test]
    fn kl_hand_values() {
        let mut tape = Tape::new();
        let q = gaussian(&mut tape, vec![1.0], vec![0.0]);
        let p = gaussian(&mut tape, vec![0.0], vec![0.0]);
        let kl = kl_divergence(&mut tape, &q, &p);
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-12);

        let q = gaussian(&mut tape, vec![0.0], vec![4.0f64.ln()]);
        let p = gaussian(&mut tape, vec![0.0], vec![0.0]);
        let kl = kl_divergence(&mut tape, &q, &p);
        let expected = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((tape.value(kl).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let dim = rng.random_range(1..=6);
            let mut tape = Tape::new();
            let draw = |rng: &mut ChaCha8Rng| {
                (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>()
            };
            let (mq, lq, mp, lp) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let identical = mq == mp && lq == lp;
            let q = gaussian(&mut tape, mq, lq);
            let p = gaussian(&mut tape, mp, lp);
            let kl_id = kl_divergence(&mut tape, &q, &p);
            let kl = tape.value(kl_id).item();
            assert!(kl >= 0.0, "negative KL {kl}");
            if !identical {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn reparameterize_endpoints() {
        let mut tape = Tape::new();
        let g = gaussian(&mut tape, vec![1.5, -2.0], vec![0.0, 0.0]);
        let zero = reparameterize(&mut tape, &g, &[0.0, 0.0]);
        assert_eq!(tape.value(zero).data(), &[1.5, -2.0]);
        let unit = reparameterize(&mut tape, &g, &[0.5, -1.0]);
        assert_eq!(tape.value(unit).data(), &[2.0, -3.0]);
    }

    #[test]
    fn reparameterize_sample_mean_approaches_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mu, log_var) = (0.7, (0.25f64).ln());
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            let eps: f64 = rng.sample(StandardNormal);
            let mut tape = Tape::new();
            let g = gaussian(&mut tape, vec![mu], vec![log_var]);
            let s = reparameterize(&mut tape, &g, &[eps]);
            total += tape.value(s).item();
        }
        let mean = total / n as f64;
        let sigma = 0.5;
        assert!((mean - mu).abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    fn hand_store(dims: &ModelDims) -> ParameterStore {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        encoder::register(&mut store, dims, &mut rng);
        register(&mut store, dims, Ablation::Full, &mut rng);
        store
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            vocab: 8,
            embed: 2,
            hidden: 3,
            latent: 2,
            alpha_hidden: 2,
            attn_hidden: 2,
            copy_hidden: 2,
        }
    }

    #[test]
    fn group_posterior_single_word_takes_all_weight() {
        let dims = tiny_dims();
        let store = hand_store(&dims);
        let mut tape = Tape::new();
        let enc_vars = encoder::bind(&mut tape, &store, &dims);
        let vars = bind(&mut tape, &store, &dims, Ablation::Full);
        let encoded = vec![encoder::encode_review(&mut tape, &enc_vars, &[5])];
        let (_, trace) = infer_group_posterior(&mut tape, &vars, &encoded);
        assert_eq!(tape.value(trace.alpha).data(), &[1.0]);
        assert_eq!(
            tape.value(trace.pooled).data(),
            tape.value(encoded[0].concat[0]).data()
        );
        assert_eq!(trace.positions, vec![(0, 0)]);
    }

    #[test]
    fn group_posterior_zero_scorer_is_uniform() {
        let dims = tiny_dims();
        let mut store = hand_store(&dims);
        for name in ["latent.alpha.w1", "latent.alpha.w2"] {
            store.value_mut(name).data_mut().fill(0.0);
        }
        for name in ["latent.alpha.b1", "latent.alpha.b2"] {
            store.value_mut(name).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let enc_vars = encoder::bind(&mut tape, &store, &dims);
        let vars = bind(&mut tape, &store, &dims, Ablation::Full);
        let encoded = vec![
            encoder::encode_review(&mut tape, &enc_vars, &[4, 5]),
            encoder::encode_review(&mut tape, &enc_vars, &[6, 7, 5]),
        ];
        let (_, trace) = infer_group_posterior(&mut tape, &vars, &encoded);
        let alpha = tape.value(trace.alpha).data();
        assert_eq!(alpha.len(), 5);
        for &a in alpha {
            assert!((a - 0.2).abs() < 1e-12);
        }
        let sum: f64 = alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn alpha_sums_to_one_and_pools_correctly() {
        let dims = tiny_dims();
        let store = hand_store(&dims);
        let mut tape = Tape::new();
        let enc_vars = encoder::bind(&mut tape, &store, &dims);
        let vars = bind(&mut tape, &store, &dims, Ablation::Full);
        let encoded = vec![
            encoder::encode_review(&mut tape, &enc_vars, &[4, 6]),
            encoder::encode_review(&mut tape, &enc_vars, &[7]),
        ];
        let (gaussian, trace) = infer_group_posterior(&mut tape, &vars, &encoded);
        let alpha = tape.value(trace.alpha).data().to_vec();
        let sum: f64 = alpha.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(trace.positions, vec![(0, 0), (0, 1), (1, 0)]);

        // ĥ really is Σ α·m.
        let mut expected = vec![0.0; dims.hidden + dims.embed];
        for (k, (i, t)) in trace.positions.iter().enumerate() {
            for (e, &v) in expected.iter_mut().zip(tape.value(encoded[*i].concat[*t]).data()) {
                *e += alpha[k] * v;
            }
        }
        for (a, b) in tape.value(trace.pooled).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(tape.value(gaussian.mean).len(), dims.latent);
    }

    #[test]
    fn z_prior_heads_and_zero_input() {
        let dims = tiny_dims();
        let store = hand_store(&dims);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &store, &dims, Ablation::Full);
        let c = tape.constant(Tensor::zeros(vec![dims.latent]));
        let prior = prior_z(&mut tape, &vars, Some(c));
        assert_eq!(
            tape.value(prior.mean).data(),
            store.value("latent.z_prior.mean.b").data()
        );
        assert_eq!(
            tape.value(prior.log_var).data(),
            store.value("latent.z_prior.log_var.b").data()
        );
    }

    #[test]
    fn review_posterior_is_deterministic_in_its_inputs() {
        let dims = tiny_dims();
        let store = hand_store(&dims);
        let mut tape = Tape::new();
        let enc_vars = encoder::bind(&mut tape, &store, &dims);
        let vars = bind(&mut tape, &store, &dims, Ablation::Full);
        let a = encoder::encode_review(&mut tape, &enc_vars, &[4, 5]);
        let b = encoder::encode_review(&mut tape, &enc_vars, &[4, 5]);
        let c = tape.constant(Tensor::vector(vec![0.3, -0.4]));
        let qa = infer_review_posterior(&mut tape, &vars, a.final_state, Some(c));
        let qb = infer_review_posterior(&mut tape, &vars, b.final_state, Some(c));
        assert_eq!(tape.value(qa.mean).data(), tape.value(qb.mean).data());
        assert_eq!(tape.value(qa.log_var).data(), tape.value(qb.log_var).data());
    }

    #[test]
    fn kl_and_reparameterize_pass_grad_check() {
        use crate::ndiff::grad_check;
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        store.register_vector("q.mean", 3, &mut rng);
        store.register_vector("q.log_var", 3, &mut rng);
        store.register_vector("p.mean", 3, &mut rng);
        store.register_vector("p.log_var", 3, &mut rng);
        let noise: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        let report = grad_check(&mut store, 1e-6, |store| {
            let mut tape = Tape::new();
            let q = DiagGaussian {
                mean: tape.param(store, "q.mean"),
                log_var: tape.param(store, "q.log_var"),
            };
            let p = DiagGaussian {
                mean: tape.param(store, "p.mean"),
                log_var: tape.param(store, "p.log_var"),
            };
            let kl = kl_divergence(&mut tape, &q, &p);
            let sample = reparameterize(&mut tape, &q, &noise);
            let probe = tape.constant(Tensor::vector(vec![0.3, -1.1, 0.7]));
            let dot = tape.dot(sample, probe);
            let sq = tape.mul(dot, dot);
            let root = tape.add(kl, sq);
            (tape, root)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "rel error {}", report.max_rel_error);
    }
}
