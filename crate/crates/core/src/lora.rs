//! Low-rank adapters on linear layers.
//!
//! An adapter on a `d × k` weight `W₀` holds `B: d × r` and `A: r × k` and
//! contributes `ΔW = (α/r)·B·A`, so a layer computes
//! `h = W₀x + (α/r)·B·A·x`. `A` starts Gaussian and `B` starts at zero, which
//! makes a freshly attached adapter an exact no-op.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, LayerId, Role};
use crate::numerics::{derive_seed, seeded_rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTargets {
    AllLinear,
    MlpOnly,
    AttnOnly,
}

impl LoraTargets {
    /// `lm_head` is never a target.
    pub fn includes(self, role: Role) -> bool {
        match self {
            LoraTargets::AllLinear => role != Role::LmHead,
            LoraTargets::MlpOnly => role.is_mlp(),
            LoraTargets::AttnOnly => role.is_attention(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoraTargets::AllLinear => "all_linear",
            LoraTargets::MlpOnly => "mlp_only",
            LoraTargets::AttnOnly => "attn_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: LoraTargets,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: LoraTargets::AllLinear,
            init_std: 0.02,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub layer: LayerId,
    /// `r × k`
    pub a: Tensor,
    /// `d × r`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r)·B·A`, shaped like the adapted weight.
    pub fn effective_delta(&self) -> Result<Tensor> {
        Ok(self.b.matmul(&self.a)?.scale(self.scaling()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub config: LoraConfig,
    pub adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    pub fn layers(&self) -> Vec<LayerId> {
        self.adapters.iter().map(|a| a.layer).collect()
    }

    pub fn get(&self, layer: LayerId) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.layer == layer)
    }

    /// Shapes must agree with the checkpoint's target layers.
    pub fn check_against(&self, ck: &Checkpoint) -> Result<()> {
        for ad in &self.adapters {
            let w = ck.linear(ad.layer)?;
            let (d, k) = (w.shape()[0], w.shape()[1]);
            if ad.a.shape() != [ad.rank, k] || ad.b.shape() != [d, ad.rank] {
                return Err(Error::Schema {
                    name: ad.layer.to_string(),
                    message: format!(
                        "adapter A {:?} / B {:?} incompatible with weight {:?} at rank {}",
                        ad.a.shape(),
                        ad.b.shape(),
                        w.shape(),
                        ad.rank
                    ),
                });
            }
        }
        Ok(())
    }
}

/// One adapter per targeted layer, `A ~ N(0, init_std²)`, `B = 0`.
pub fn attach(ck: &Checkpoint, cfg: &LoraConfig) -> Result<AdapterSet> {
    if cfg.rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::Config(format!("LoRA alpha must be positive, got {}", cfg.alpha)));
    }
    let mut rng = seeded_rng(derive_seed(cfg.seed, "lora"));
    let mut adapters = Vec::new();
    for layer in ck.config.linear_layers() {
        if !cfg.targets.includes(layer.role) {
            continue;
        }
        let w = ck.linear(layer)?;
        let (d, k) = (w.shape()[0], w.shape()[1]);
        if cfg.rank > d.min(k) {
            return Err(Error::Config(format!(
                "rank {} exceeds min(d, k) = {} for {layer}",
                cfg.rank,
                d.min(k)
            )));
        }
        adapters.push(LoraAdapter {
            layer,
            a: Tensor::randn(&[cfg.rank, k], cfg.init_std, &mut rng),
            b: Tensor::zeros(&[d, cfg.rank]),
            rank: cfg.rank,
            alpha: cfg.alpha,
        });
    }
    Ok(AdapterSet {
        config: cfg.clone(),
        adapters,
    })
}

/// Fold every adapter into its base weight: `W ← W₀ + (α/r)·B·A`.
pub fn merge(ck: &Checkpoint, set: &AdapterSet) -> Result<Checkpoint> {
    set.check_against(ck)?;
    let mut out = ck.clone();
    for ad in &set.adapters {
        let name = ad.layer.param_name();
        let merged = ck.param(&name)?.add(&ad.effective_delta()?)?;
        out.params.insert(name, merged);
    }
    Ok(out.with_provenance_suffix(":merged"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};

    fn small() -> Checkpoint {
        init_model(&ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            context_len: 8,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn adapter_counts_per_target_mode() {
        let ck = small();
        let n = ck.config.n_layers;
        let count = |t| {
            attach(&ck, &LoraConfig { targets: t, rank: 2, ..Default::default() })
                .unwrap()
                .adapters
                .len()
        };
        assert_eq!(count(LoraTargets::MlpOnly), 2 * n);
        assert_eq!(count(LoraTargets::AttnOnly), 4 * n);
        assert_eq!(count(LoraTargets::AllLinear), 6 * n);
    }

    #[test]
    fn oversized_rank_rejected() {
        let ck = small();
        let cfg = LoraConfig { rank: 9, ..Default::default() };
        assert!(matches!(attach(&ck, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn effective_delta_hand_product() {
        let ad = LoraAdapter {
            layer: LayerId::new(0, Role::AttnQ),
            a: Tensor::from_rows(&[&[3.0, 0.0]]),
            b: Tensor::from_rows(&[&[1.0], &[1.0]]),
            rank: 1,
            alpha: 2.0,
        };
        let d = ad.effective_delta().unwrap();
        assert_eq!(d, Tensor::from_rows(&[&[6.0, 0.0], &[6.0, 0.0]]));

        let doubled = LoraAdapter { alpha: 4.0, ..ad.clone() };
        assert_eq!(doubled.effective_delta().unwrap(), d.scale(2.0));

        let zero = LoraAdapter { b: Tensor::zeros(&[2, 1]), ..ad };
        assert_eq!(zero.effective_delta().unwrap().max_abs(), 0.0);
    }

    #[test]
    fn merging_fresh_adapters_is_identity_on_params() {
        let ck = small();
        let set = attach(&ck, &LoraConfig { rank: 2, ..Default::default() }).unwrap();
        let merged = merge(&ck, &set).unwrap();
        assert_eq!(merged.params, ck.params);
        assert!(merged.provenance.ends_with(":merged"));
    }
}
