//! Training objective and loop: assembles the group ELBO, anneals the KL
//! weights cyclically, and runs Adam over shuffled group batches.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, GroupRecord, ReviewGroup, Vocabulary};
use crate::decoder;
use crate::encoder::{self, EncodedReview};
use crate::latent;
use crate::model::{self, Ablation, Checkpoint, ModelConfig, ModelDims, ModelVars};
use crate::ndiff::{NdiffError, ParameterStore, Tape, Tensor, VarId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("loss became non-finite at step {step} on group {group_id:?}")]
    NonFinite { step: usize, group_id: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Ndiff(#[from] NdiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Cyclical KL annealing: within each cycle β rises linearly from 0 to its
/// maximum over the first `ramp_fraction` of steps, then holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub cycle_length: usize,
    pub ramp_fraction: f64,
    pub beta_max_z: f64,
    pub beta_max_c: f64,
}

pub fn anneal_beta(step: usize, schedule: &AnnealSchedule) -> (f64, f64) {
    assert!(schedule.cycle_length >= 1, "cycle length must be positive");
    assert!(
        schedule.ramp_fraction > 0.0 && schedule.ramp_fraction <= 1.0,
        "ramp fraction must be in (0, 1]"
    );
    let pos = (step % schedule.cycle_length) as f64;
    let ramp = schedule.ramp_fraction * schedule.cycle_length as f64;
    let phase = (pos / ramp).min(1.0);
    (schedule.beta_max_z * phase, schedule.beta_max_c * phase)
}

/// Everything `train` needs, deserializable from a TOML file. Every field
/// has a default so configs only list what they change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub vocab_size: usize,
    pub max_extended: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub alpha_hidden: usize,
    pub attn_hidden: usize,
    pub copy_hidden: usize,
    pub group_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Global-norm gradient clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Extra checkpoints every this many steps; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub ablation: Ablation,
    pub generation_mode: crate::generate::GenerationMode,
    /// Steps per annealing cycle; unset means two epochs over the corpus.
    pub cycle_length: Option<usize>,
    pub ramp_fraction: f64,
    pub beta_max_z: f64,
    pub beta_max_c: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            vocab_size: 50_000,
            max_extended: 30_000,
            embed_dim: 200,
            hidden_dim: 600,
            latent_dim: 600,
            alpha_hidden: 200,
            attn_hidden: 200,
            copy_hidden: 100,
            group_size: 8,
            steps: 1000,
            learning_rate: 0.0008,
            grad_clip: 5.0,
            seed: 0,
            checkpoint_interval: 0,
            ablation: Ablation::Full,
            generation_mode: crate::generate::GenerationMode::Mean,
            cycle_length: None,
            ramp_fraction: 0.8,
            beta_max_z: 1.0,
            beta_max_c: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.vocab_size,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
            latent: self.latent_dim,
            alpha_hidden: self.alpha_hidden,
            attn_hidden: self.attn_hidden,
            copy_hidden: self.copy_hidden,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { dims: self.dims(), ablation: self.ablation, max_extended: self.max_extended }
    }

    /// Resolves the schedule; an unset cycle length becomes two epochs'
    /// worth of steps (one step per group).
    pub fn schedule(&self, corpus_groups: usize) -> AnnealSchedule {
        AnnealSchedule {
            cycle_length: self.cycle_length.unwrap_or_else(|| (2 * corpus_groups).max(1)),
            ramp_fraction: self.ramp_fraction,
            beta_max_z: self.beta_max_z,
            beta_max_c: self.beta_max_c,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("max_extended", self.max_extended),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
            ("alpha_hidden", self.alpha_hidden),
            ("attn_hidden", self.attn_hidden),
            ("copy_hidden", self.copy_hidden),
            ("group_size", self.group_size),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.vocab_size < crate::corpus::SPECIAL_TOKENS.len() {
            return Err("vocab_size must cover the special tokens".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err("learning_rate must be finite and non-negative".into());
        }
        if !(self.ramp_fraction > 0.0 && self.ramp_fraction <= 1.0) {
            return Err("ramp_fraction must be in (0, 1]".into());
        }
        if self.beta_max_z < 0.0 || self.beta_max_c < 0.0 {
            return Err("beta maxima must be non-negative".into());
        }
        if self.cycle_length == Some(0) {
            return Err("cycle_length must be positive when set".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, String> {
        let config: TrainConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml_str(&text)
    }
}

/// Frozen standard-normal draws for one ELBO evaluation: one vector for c
/// and one per review for z.
#[derive(Debug, Clone)]
pub struct ElboNoise {
    pub c: Vec<f64>,
    pub z: Vec<Vec<f64>>,
}

impl ElboNoise {
    pub fn draw(rng: &mut impl rand::Rng, reviews: usize, latent_dim: usize) -> Self {
        let mut sample = |n: usize| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(rng)).collect()
        };
        ElboNoise { c: sample(latent_dim), z: (0..reviews).map(|_| sample(latent_dim)).collect() }
    }

    pub fn zeros(reviews: usize, latent_dim: usize) -> Self {
        ElboNoise { c: vec![0.0; latent_dim], z: vec![vec![0.0; latent_dim]; reviews] }
    }
}

/// Tape nodes for the assembled objective.
pub struct ElboGraph {
    pub total: VarId,
    pub reconstruction: VarId,
    pub kl_z: VarId,
    pub kl_c: VarId,
    pub target_tokens: usize,
}

/// Values read off an evaluated graph.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_z: f64,
    pub kl_c: f64,
    pub beta_z: f64,
    pub beta_c: f64,
    pub total: f64,
    pub target_tokens: usize,
    pub floor_events: usize,
}

impl LossBreakdown {
    pub fn per_token_nll(&self) -> f64 {
        -self.reconstruction / self.target_tokens as f64
    }
}

impl ElboGraph {
    pub fn read(&self, tape: &Tape, beta_z: f64, beta_c: f64) -> LossBreakdown {
        LossBreakdown {
            reconstruction: tape.value(self.reconstruction).item(),
            kl_z: tape.value(self.kl_z).item(),
            kl_c: tape.value(self.kl_c).item(),
            beta_z,
            beta_c,
            total: tape.value(self.total).item(),
            target_tokens: self.target_tokens,
            floor_events: tape.floor_events(),
        }
    }
}

fn sum_scalars(tape: &mut Tape, terms: &[VarId]) -> VarId {
    match terms {
        [] => tape.scalar(0.0),
        [single] => *single,
        many => {
            let stacked = tape.concat(many);
            tape.sum(stacked)
        }
    }
}

/// Builds the negative ELBO for one group:
/// total = −Σ_i log p(r_i | ·) + β_z·Σ_i KL(q_z_i ‖ p_z) + β_c·KL(q_c ‖ N(0,I)).
#[allow(clippy::too_many_arguments)]
pub fn elbo(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    group: &ReviewGroup,
    ext_size: usize,
    noise: &ElboNoise,
    beta_z: f64,
    beta_c: f64,
) -> ElboGraph {
    let ablation = config.ablation;
    assert!(!group.reviews.is_empty(), "cannot score an empty group");
    assert_eq!(noise.z.len(), group.reviews.len(), "one z draw per review");

    let encoded: Vec<EncodedReview> = group
        .reviews
        .iter()
        .map(|r| encoder::encode_review(tape, &vars.encoder, &r.token_ids))
        .collect();

    let (c_sample, kl_c) = if ablation.uses_c() {
        let (q_c, _) = latent::infer_group_posterior(tape, &vars.latent, &encoded);
        let prior = latent::prior_standard(tape, config.dims.latent);
        let kl = latent::kl_divergence(tape, &q_c, &prior);
        let c = latent::reparameterize(tape, &q_c, &noise.c);
        (Some(c), kl)
    } else {
        (None, tape.scalar(0.0))
    };

    let ext_ids: Vec<&[u32]> = group.reviews.iter().map(|r| r.extended_ids.as_slice()).collect();
    let mut recon_terms = Vec::with_capacity(group.reviews.len());
    let mut kl_z_terms = Vec::new();
    let mut target_tokens = 0;
    for (i, review) in group.reviews.iter().enumerate() {
        let source = ablation
            .uses_attention()
            .then(|| decoder::copy_source(&encoded, &ext_ids, Some(i)));
        let (code, z_input) = if ablation.uses_z() {
            let q_z =
                latent::infer_review_posterior(tape, &vars.latent, encoded[i].final_state, c_sample);
            let p_z = latent::prior_z(tape, &vars.latent, c_sample);
            kl_z_terms.push(latent::kl_divergence(tape, &q_z, &p_z));
            let z = latent::reparameterize(tape, &q_z, &noise.z[i]);
            (z, Some(z))
        } else {
            let c = c_sample.expect("the no-z wiring keeps the group variable");
            (c, None)
        };
        let (inputs, targets) = decoder::teacher_sequences(review);
        target_tokens += targets.len();
        let ll = decoder::review_log_likelihood(
            tape,
            &vars.encoder,
            &vars.decoder,
            code,
            z_input,
            &inputs,
            &targets,
            source.as_ref(),
            ext_size,
        );
        recon_terms.push(ll);
    }

    let reconstruction = sum_scalars(tape, &recon_terms);
    let kl_z = sum_scalars(tape, &kl_z_terms);
    let neg_recon = tape.affine_const(reconstruction, -1.0, 0.0);
    let weighted_z = tape.affine_const(kl_z, beta_z, 0.0);
    let weighted_c = tape.affine_const(kl_c, beta_c, 0.0);
    let partial = tape.add(neg_recon, weighted_z);
    let total = tape.add(partial, weighted_c);
    ElboGraph { total, reconstruction, kl_z, kl_c, target_tokens }
}

/// Adam with bias correction; moment buffers are keyed by parameter name.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update from the store's accumulated gradients.
    pub fn step(&mut self, store: &mut ParameterStore) {
        self.step += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step as i32);
        let correction2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let (m_buf, v_buf) = (&mut self.m, &mut self.v);
        store.update_each(|name, value, grad| {
            let m = m_buf.entry(name.to_string()).or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            let v = v_buf.entry(name.to_string()).or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            for ((x, g), (m, v)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / correction1;
                let v_hat = *v / correction2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Per-step log record, written as CSV.
fn log_line(step: usize, loss: &LossBreakdown) -> String {
    format!(
        "{step},{},{},{},{},{},{}\n",
        loss.beta_z, loss.beta_c, loss.reconstruction, loss.kl_z, loss.kl_c, loss.total
    )
}

pub const LOG_HEADER: &str = "step,beta_z,beta_c,reconstruction,kl_z,kl_c,total\n";

/// What `train` leaves on disk plus the last step's loss.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub final_loss: LossBreakdown,
    pub steps_run: usize,
}

/// Runs the full training loop: shuffled one-group batches, annealed ELBO,
/// global-norm clipping, Adam, CSV log, checkpoints. Deterministic for a
/// fixed config and corpus.
pub fn train(
    groups: &[GroupRecord],
    vocab: &Vocabulary,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    if groups.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    config.validate().map_err(|msg| {
        TrainError::Io(std::io::Error::new(std::io::ErrorKind::InvalidInput, msg))
    })?;
    std::fs::create_dir_all(out_dir)?;
    let model_config = config.model_config();
    let dims = model_config.dims;
    let schedule = config.schedule(groups.len());
    let mut store = model::init_parameters(&dims, config.ablation, config.seed);
    let mut adam = Adam::new(config.learning_rate);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let log_path = out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    log.write_all(LOG_HEADER.as_bytes())?;

    let checkpoint_path = out_dir.join("model.ckpt");
    let mut final_loss = None;
    let mut step = 0;
    let mut epoch = 0u64;
    'steps: while step < config.steps {
        let batches = crate::corpus::make_batches(
            groups,
            vocab,
            config.group_size,
            config.seed.wrapping_add(epoch.wrapping_mul(0x9e37_79b9)),
        )?;
        for batch in &batches {
            if step >= config.steps {
                break 'steps;
            }
            let (beta_z, beta_c) = anneal_beta(step, &schedule);
            let group = &batch.groups[0];
            let ext_size = vocab.size() + batch.oov_tables[0].len();
            let noise =
                ElboNoise::draw(&mut noise_rng, group.reviews.len(), dims.latent);
            let loss = {
                let mut tape = Tape::new();
                let vars = model::bind(&mut tape, &store, &model_config);
                let graph =
                    elbo(&mut tape, &vars, &model_config, group, ext_size, &noise, beta_z, beta_c);
                let loss = graph.read(&tape, beta_z, beta_c);
                if !loss.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        step,
                        group_id: group.group_id.clone(),
                    });
                }
                let grads = tape.backward(graph.total);
                for (name, grad) in tape.param_gradients(&grads) {
                    store.accumulate_grad(&name, &grad);
                }
                loss
            };
            if config.grad_clip > 0.0 {
                let norm = store.grad_norm();
                if norm > config.grad_clip {
                    store.scale_grads(config.grad_clip / norm);
                }
            }
            adam.step(&mut store);
            store.zero_grads();
            log.write_all(log_line(step, &loss).as_bytes())?;
            final_loss = Some(loss);
            step += 1;
            if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 {
                let snapshot = Checkpoint {
                    config: model_config,
                    vocab: vocab.clone(),
                    step: step as u64,
                    store: store.clone(),
                };
                snapshot.save(&out_dir.join(format!("model_step_{step}.ckpt")))?;
            }
        }
        epoch += 1;
    }
    log.flush()?;
    let checkpoint = Checkpoint {
        config: model_config,
        vocab: vocab.clone(),
        step: step as u64,
        store,
    };
    checkpoint.save(&checkpoint_path)?;
    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        final_loss: final_loss.expect("at least one step ran"),
        steps_run: step,
    })
}
