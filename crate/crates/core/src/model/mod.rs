//! Tiny pre-norm decoder-only transformer with named linear layers.
//!
//! Parameter schema (weights are `out × in`, applied as `x·Wᵀ`, no biases
//! on linear layers):
//!
//! ```text
//! tok_emb                 V × d
//! pos_emb                 context_len × d
//! blocks.{i}.ln1.gain     d          blocks.{i}.ln1.bias   d
//! blocks.{i}.attn_q.weight d × d     (also attn_k, attn_v, attn_o)
//! blocks.{i}.ln2.gain     d          blocks.{i}.ln2.bias   d
//! blocks.{i}.mlp_up.weight   d_ff × d
//! blocks.{i}.mlp_down.weight d × d_ff
//! ln_f.gain               d          ln_f.bias             d
//! lm_head.weight          V × d
//! ```

mod forward;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seeded_rng, Tensor};

pub use forward::{
    bind_adapters, bind_params, forward_hidden, forward_logits, greedy_decode,
    greedy_decode_batch, next_token_logits_graph, next_token_probs, nll_loss, nll_loss_graph,
    sequence_log_probs, token_log_probs_graph, BoundAdapters, BoundParams, Packed,
};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            context_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_len < 2 {
            return Err(Error::Config("context_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Canonical parameter names and shapes.
    pub fn schema(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let mut s = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.context_len, d]),
        ];
        for b in 0..self.n_layers {
            s.push((format!("blocks.{b}.ln1.gain"), vec![d]));
            s.push((format!("blocks.{b}.ln1.bias"), vec![d]));
            for role in Role::ATTENTION {
                s.push((LayerId::new(b, role).param_name(), vec![d, d]));
            }
            s.push((format!("blocks.{b}.ln2.gain"), vec![d]));
            s.push((format!("blocks.{b}.ln2.bias"), vec![d]));
            s.push((LayerId::new(b, Role::MlpUp).param_name(), vec![f, d]));
            s.push((LayerId::new(b, Role::MlpDown).param_name(), vec![d, f]));
        }
        s.push(("ln_f.gain".to_string(), vec![d]));
        s.push(("ln_f.bias".to_string(), vec![d]));
        s.push((LayerId::lm_head(self).param_name(), vec![v, d]));
        s
    }

    pub fn param_count(&self) -> usize {
        self.schema()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Every linear weight matrix, in schema order (including `lm_head`).
    pub fn linear_layers(&self) -> Vec<LayerId> {
        let mut out = Vec::new();
        for b in 0..self.n_layers {
            for role in Role::BLOCK {
                out.push(LayerId::new(b, role));
            }
        }
        out.push(LayerId::lm_head(self));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpUp,
    MlpDown,
    LmHead,
}

impl Role {
    pub const ATTENTION: [Role; 4] = [Role::AttnQ, Role::AttnK, Role::AttnV, Role::AttnO];
    pub const MLP: [Role; 2] = [Role::MlpUp, Role::MlpDown];
    pub const BLOCK: [Role; 6] = [
        Role::AttnQ,
        Role::AttnK,
        Role::AttnV,
        Role::AttnO,
        Role::MlpUp,
        Role::MlpDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::AttnQ => "attn_q",
            Role::AttnK => "attn_k",
            Role::AttnV => "attn_v",
            Role::AttnO => "attn_o",
            Role::MlpUp => "mlp_up",
            Role::MlpDown => "mlp_down",
            Role::LmHead => "lm_head",
        }
    }

    pub fn is_attention(self) -> bool {
        Role::ATTENTION.contains(&self)
    }

    pub fn is_mlp(self) -> bool {
        Role::MLP.contains(&self)
    }
}

/// Address of one linear layer. `lm_head` uses `block = n_layers`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub role: Role,
}

impl LayerId {
    pub fn new(block: usize, role: Role) -> Self {
        Self { block, role }
    }

    pub fn lm_head(cfg: &ModelConfig) -> Self {
        Self {
            block: cfg.n_layers,
            role: Role::LmHead,
        }
    }

    pub fn param_name(&self) -> String {
        match self.role {
            Role::LmHead => "lm_head.weight".to_string(),
            r => format!("blocks.{}.{}.weight", self.block, r.as_str()),
        }
    }

    /// Inverse of [`LayerId::param_name`].
    pub fn parse(name: &str, cfg: &ModelConfig) -> Option<Self> {
        if name == "lm_head.weight" {
            return Some(Self::lm_head(cfg));
        }
        let rest = name.strip_prefix("blocks.")?.strip_suffix(".weight")?;
        let (block, role) = rest.split_once('.')?;
        let block: usize = block.parse().ok()?;
        let role = Role::BLOCK.into_iter().find(|r| r.as_str() == role)?;
        (block < cfg.n_layers).then_some(Self { block, role })
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.role {
            Role::LmHead => write!(f, "lm_head"),
            r => write!(f, "blocks.{}.{}", self.block, r.as_str()),
        }
    }
}

/// Model parameters plus the configuration they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub provenance: String,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Schema {
            name: name.to_string(),
            message: "missing".into(),
        })
    }

    pub fn linear(&self, layer: LayerId) -> Result<&Tensor> {
        self.param(&layer.param_name())
    }

    /// Check names and shapes against the config-derived schema.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let schema = self.config.schema();
        for (name, shape) in &schema {
            let t = self.param(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Schema {
                    name: name.clone(),
                    message: format!("expected shape {shape:?}, found {:?}", t.shape()),
                });
            }
        }
        if self.params.len() != schema.len() {
            let extra = self
                .params
                .keys()
                .find(|k| !schema.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Schema {
                name: extra,
                message: "not part of the model schema".into(),
            });
        }
        Ok(())
    }

    pub fn with_provenance_suffix(mut self, suffix: &str) -> Self {
        self.provenance.push_str(suffix);
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, path)
    }
}

/// Seeded initialization: normal(0, 0.02²) for embeddings and linear
/// weights, unit gain and zero bias for layer norms.
pub fn init_model(config: &ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = seeded_rng(derive_seed(config.seed, "init"));
    let mut params = BTreeMap::new();
    for (name, shape) in config.schema() {
        let t = if name.ends_with(".gain") {
            Tensor::ones(&shape)
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            Tensor::randn(&shape, INIT_STD, &mut rng)
        };
        params.insert(name, t);
    }
    Ok(Checkpoint {
        config: config.clone(),
        provenance: "init".into(),
        params,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    crate::artifact::Artifact::from_checkpoint(ck.clone()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Ok(crate::artifact::Artifact::load(path)?.checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_hand_count() {
        let cfg = ModelConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            context_len: 64,
            seed: 1,
        };
        // embeddings + per block (2 layer norms, 4 attention, 2 mlp) + final norm + head
        let per_block = 2 * 2 * 64 + 4 * 64 * 64 + 2 * 64 * 256;
        let expected = 64 * 64 + 64 * 64 + 2 * per_block + 2 * 64 + 64 * 64;
        assert_eq!(expected, 111_232);
        let ck = init_model(&cfg).unwrap();
        let n: usize = ck.params.values().map(|t| t.len()).sum();
        assert_eq!(n, expected);
        assert_eq!(cfg.param_count(), expected);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            context_len: 8,
            seed: 5,
        };
        assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
        let other = init_model(&ModelConfig { seed: 6, ..cfg.clone() }).unwrap();
        assert_ne!(init_model(&cfg).unwrap().params, other.params);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(init_model(&bad), Err(Error::Config(_))));
        let bad = ModelConfig {
            context_len: 1,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn layer_names_round_trip() {
        let cfg = ModelConfig::default();
        for l in cfg.linear_layers() {
            assert_eq!(LayerId::parse(&l.param_name(), &cfg), Some(l));
        }
        assert_eq!(LayerId::parse("tok_emb", &cfg), None);
        assert_eq!(cfg.linear_layers().len(), 6 * cfg.n_layers + 1);
    }
}
