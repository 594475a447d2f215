//! Model-level glue: dimensions, ablation switches, parameter
//! initialization across the encoder/latent/decoder groups, and binary
//! checkpoints that bundle parameters with their config and vocabulary.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::decoder::{self, DecoderVars};
use crate::encoder::{self, EncoderVars};
use crate::latent::{self, LatentVars};
use crate::ndiff::{NdiffError, ParameterStore, Tape};

const CHECKPOINT_MAGIC: &[u8; 4] = b"CCKP";
const CHECKPOINT_VERSION: u32 = 1;

/// Layer sizes. `vocab` counts the fixed vocabulary including the special
/// tokens; extended copy ids live past it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
    pub alpha_hidden: usize,
    pub attn_hidden: usize,
    pub copy_hidden: usize,
}

/// Which pieces of the full model are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Attention and the copy mechanism are disabled; the decoder context
    /// stays zero and the output distribution is the plain vocabulary
    /// softmax.
    NoAttention,
    /// The group variable is removed: review codes use a standard normal
    /// prior and their posterior conditions on the review encoding alone.
    NoC,
    /// Review codes are removed: the decoder is seeded from the group
    /// variable and gets no code appended to its per-step input.
    NoZ,
}

impl Ablation {
    pub fn uses_attention(self) -> bool {
        !matches!(self, Ablation::NoAttention)
    }

    pub fn uses_c(self) -> bool {
        !matches!(self, Ablation::NoC)
    }

    pub fn uses_z(self) -> bool {
        !matches!(self, Ablation::NoZ)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Ablation::Full => "full",
            Ablation::NoAttention => "no_attention",
            Ablation::NoC => "no_c",
            Ablation::NoZ => "no_z",
        };
        f.write_str(name)
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_attention" => Ok(Ablation::NoAttention),
            "no_c" => Ok(Ablation::NoC),
            "no_z" => Ok(Ablation::NoZ),
            other => Err(format!(
                "unknown ablation {other:?}; expected full, no_attention, no_c, or no_z"
            )),
        }
    }
}

/// Everything a checkpoint needs to rebuild the model besides the weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub ablation: Ablation,
    pub max_extended: usize,
}

/// All tape bindings for one forward pass.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub latent: LatentVars,
    pub decoder: DecoderVars,
}

/// Registers every parameter with a deterministic seed-dependent init.
pub fn init_parameters(dims: &ModelDims, ablation: Ablation, seed: u64) -> ParameterStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    encoder::register(&mut store, dims, &mut rng);
    latent::register(&mut store, dims, ablation, &mut rng);
    decoder::register(&mut store, dims, ablation, &mut rng);
    store
}

pub fn bind(tape: &mut Tape, store: &ParameterStore, config: &ModelConfig) -> ModelVars {
    ModelVars {
        encoder: encoder::bind(tape, store, &config.dims),
        latent: latent::bind(tape, store, &config.dims, config.ablation),
        decoder: decoder::bind(tape, store, &config.dims, config.ablation),
    }
}

/// A saved model: weights plus the config and vocabulary needed to use them.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub step: u64,
    pub store: ParameterStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NdiffError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        let config = serde_json::to_vec(&self.config).expect("config serializes");
        buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
        buf.extend_from_slice(&config);
        buf.extend_from_slice(&(self.vocab.size() as u32).to_le_bytes());
        for token in self.vocab.tokens() {
            buf.extend_from_slice(&(token.len() as u32).to_le_bytes());
            buf.extend_from_slice(token.as_bytes());
        }
        self.store.write_to(&mut buf)?;
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NdiffError> {
        let bytes = std::fs::read(path)?;
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cursor.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NdiffError::BadCheckpoint("missing CCKP magic".into()));
        }
        let version = read_u32(&mut cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(NdiffError::BadCheckpoint(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut step_bytes = [0u8; 8];
        cursor.read_exact(&mut step_bytes)?;
        let step = u64::from_le_bytes(step_bytes);
        let config_len = read_u32(&mut cursor)? as usize;
        let mut config_bytes = vec![0u8; config_len];
        cursor.read_exact(&mut config_bytes)?;
        let config: ModelConfig = serde_json::from_slice(&config_bytes)
            .map_err(|e| NdiffError::BadCheckpoint(format!("config block: {e}")))?;
        let token_count = read_u32(&mut cursor)? as usize;
        let mut tokens = Vec::with_capacity(token_count);
        for _ in 0..token_count {
            let len = read_u32(&mut cursor)? as usize;
            let mut raw = vec![0u8; len];
            cursor.read_exact(&mut raw)?;
            let token = String::from_utf8(raw)
                .map_err(|_| NdiffError::BadCheckpoint("vocabulary token is not UTF-8".into()))?;
            tokens.push(token);
        }
        let vocab = Vocabulary::from_tokens(tokens, config.max_extended)
            .map_err(|e| NdiffError::BadCheckpoint(format!("vocabulary block: {e}")))?;
        let store = ParameterStore::read_from(&mut cursor)?;
        Ok(Checkpoint { config, vocab, step, store })
    }

    pub fn version() -> u32 {
        CHECKPOINT_VERSION
    }
}

fn read_u32(reader: &mut impl Read) -> Result<u32, NdiffError> {
    let mut bytes = [0u8; 4];
    reader.read_exact(&mut bytes)?;
    Ok(u32::from_le_bytes(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            vocab: 12,
            embed: 3,
            hidden: 4,
            latent: 2,
            alpha_hidden: 3,
            attn_hidden: 3,
            copy_hidden: 2,
        }
    }

    fn tiny_vocab() -> Vocabulary {
        let mut tokens: Vec<String> =
            crate::corpus::SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        for word in ["the", "food", "was", "great", "service", "slow", "a", "bit"] {
            tokens.push(word.to_string());
        }
        Vocabulary::from_tokens(tokens, 100).unwrap()
    }

    #[test]
    fn ablation_round_trips_through_strings() {
        for ablation in [Ablation::Full, Ablation::NoAttention, Ablation::NoC, Ablation::NoZ] {
            assert_eq!(ablation.to_string().parse::<Ablation>().unwrap(), ablation);
        }
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn ablation_switches() {
        assert!(Ablation::Full.uses_attention());
        assert!(Ablation::Full.uses_c());
        assert!(Ablation::Full.uses_z());
        assert!(!Ablation::NoAttention.uses_attention());
        assert!(!Ablation::NoC.uses_c());
        assert!(Ablation::NoC.uses_z());
        assert!(!Ablation::NoZ.uses_z());
        assert!(Ablation::NoZ.uses_c());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let dims = tiny_dims();
        let a = init_parameters(&dims, Ablation::Full, 7);
        let b = init_parameters(&dims, Ablation::Full, 7);
        let c = init_parameters(&dims, Ablation::Full, 8);
        for name in a.names() {
            assert_eq!(a.value(name).data(), b.value(name).data());
        }
        assert!(a.names().any(|name| a.value(name).data() != c.value(name).data()));
    }

    #[test]
    fn ablations_change_the_parameter_set() {
        let dims = tiny_dims();
        let full = init_parameters(&dims, Ablation::Full, 1);
        let no_attn = init_parameters(&dims, Ablation::NoAttention, 1);
        let no_c = init_parameters(&dims, Ablation::NoC, 1);
        assert!(full.contains("decoder.attn.w1"));
        assert!(full.contains("decoder.copy.w1"));
        assert!(!no_attn.contains("decoder.attn.w1"));
        assert!(!no_attn.contains("decoder.copy.w1"));
        assert!(full.contains("latent.alpha.w1"));
        assert!(full.contains("latent.z_prior.mean.w"));
        assert!(!no_c.contains("latent.alpha.w1"));
        assert!(!no_c.contains("latent.z_prior.mean.w"));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dims = tiny_dims();
        let config = ModelConfig { dims, ablation: Ablation::Full, max_extended: 100 };
        let checkpoint = Checkpoint {
            config,
            vocab: tiny_vocab(),
            step: 42,
            store: init_parameters(&dims, Ablation::Full, 3),
        };
        let dir = std::env::temp_dir().join("copycat-model-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.ckpt");
        checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.vocab.tokens(), checkpoint.vocab.tokens());
        for name in checkpoint.store.names() {
            let a = checkpoint.store.value(name).data();
            let b = loaded.store.value(name).data();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name} drifted");
            }
        }
        // Saving the loaded checkpoint reproduces the same bytes.
        let again = dir.join("again.ckpt");
        loaded.save(&again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_load_rejects_bad_input() {
        let dir = std::env::temp_dir().join("copycat-model-bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Checkpoint::load(&path).is_err());

        let dims = tiny_dims();
        let config = ModelConfig { dims, ablation: Ablation::Full, max_extended: 50 };
        let checkpoint = Checkpoint {
            config,
            vocab: tiny_vocab(),
            step: 0,
            store: init_parameters(&dims, Ablation::Full, 4),
        };
        let good = dir.join("good.ckpt");
        checkpoint.save(&good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[4] = 99; // version field
        let bad_version = dir.join("bad_version.ckpt");
        std::fs::write(&bad_version, &bytes).unwrap();
        let err = Checkpoint::load(&bad_version).unwrap_err();
        assert!(err.to_string().contains("version"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
