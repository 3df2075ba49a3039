//! The experiment config file and its expansion into unlearning runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{entity_pool, CorpusRequest};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, LoraTargets};
use crate::metrics::Protocol;
use crate::model::ModelConfig;
use crate::numerics::derive_seed;
use crate::quantizer::QuantSpec;
use crate::train::TrainConfig;
use crate::unlearn::{Method, Mode, UnlearnConfig, DEFAULT_BETA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSizes,
    pub model: ModelShape,
    pub pretrain: PretrainConfig,
    /// Schedule for the retain-only model; defaults to the pretraining one.
    #[serde(default)]
    pub retrain: Option<TrainConfig>,
    pub gate: Gate,
    pub unlearn: UnlearnGrid,
    pub quant: Vec<QuantSpec>,
    pub protocol: Protocol,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSizes {
    pub n_forget: usize,
    pub n_retain: usize,
    pub n_holdout: usize,
}

/// Model dimensions; the vocabulary size comes from the corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub final_lr_frac: f64,
    /// Copies of the forget set mixed into the training stream.
    pub forget_duplication: usize,
}

fn one() -> f64 {
    1.0
}

impl PretrainConfig {
    pub fn schedule(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            final_lr_frac: self.final_lr_frac,
        }
    }
}

/// Minimum scores a freshly trained model must reach.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gate {
    pub min_vermem: f64,
    pub min_utility: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnGrid {
    pub batch_size: usize,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub groups: Vec<GridGroup>,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

/// One block of the grid; every list is a sweep axis and the block expands
/// to their cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGroup {
    pub methods: Vec<Method>,
    pub mode: Mode,
    pub lr: Vec<f64>,
    pub epochs: Vec<usize>,
    pub lambda: Vec<f64>,
    #[serde(default)]
    pub rank: Vec<usize>,
    /// `α / r`.
    #[serde(default)]
    pub alpha_ratio: Vec<f64>,
    #[serde(default)]
    pub targets: Vec<LoraTargets>,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

/// A fully specified unlearning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub id: String,
    pub config: UnlearnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let regularized = vec![Method::GaGdr, Method::GaKlr, Method::NpoGdr, Method::NpoKlr];
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            corpus: CorpusSizes {
                n_forget: 32,
                n_retain: 128,
                n_holdout: 32,
            },
            model: ModelShape {
                d_model: 64,
                n_layers: 2,
                n_heads: 4,
                d_ff: 256,
                context_len: 16,
            },
            pretrain: PretrainConfig {
                steps: 300,
                lr: 3e-3,
                batch_size: 32,
                final_lr_frac: 0.1,
                forget_duplication: 4,
            },
            retrain: None,
            gate: Gate {
                min_vermem: 90.0,
                min_utility: 50.0,
            },
            unlearn: UnlearnGrid {
                batch_size: 8,
                beta: DEFAULT_BETA,
                groups: vec![
                    GridGroup {
                        methods: vec![Method::Ga, Method::Npo],
                        mode: Mode::FullFt,
                        lr: vec![1e-4],
                        epochs: vec![10],
                        lambda: vec![0.0],
                        rank: vec![],
                        alpha_ratio: vec![],
                        targets: vec![],
                        init_std: 0.02,
                    },
                    GridGroup {
                        methods: regularized.clone(),
                        mode: Mode::FullFt,
                        lr: vec![1e-4],
                        epochs: vec![10],
                        lambda: vec![1.0],
                        rank: vec![],
                        alpha_ratio: vec![],
                        targets: vec![],
                        init_std: 0.02,
                    },
                    GridGroup {
                        methods: regularized,
                        mode: Mode::Lora,
                        lr: vec![3e-3],
                        epochs: vec![4],
                        lambda: vec![1.0],
                        rank: vec![4],
                        alpha_ratio: vec![2.0],
                        targets: vec![LoraTargets::AllLinear],
                        init_std: 0.02,
                    },
                ],
            },
            quant: vec![QuantSpec::int8(), QuantSpec::int4()],
            protocol: Protocol::default(),
        }
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.n_forget == 0 || c.n_retain == 0 || c.n_holdout == 0 {
            return bad("corpus sizes must all be at least 1");
        }
        let capacity = entity_pool().len();
        if c.n_forget + c.n_retain + c.n_holdout > capacity {
            return bad(format!("corpus sizes exceed the {capacity} available entities"));
        }
        self.model_config(1).validate().map_err(as_config)?;
        self.pretrain.schedule().validate().map_err(as_config)?;
        if let Some(r) = &self.retrain {
            r.validate().map_err(as_config)?;
        }
        if self.pretrain.forget_duplication == 0 {
            return bad("pretrain.forget_duplication must be at least 1");
        }
        if self.quant.is_empty() {
            return bad("quant must list at least one spec");
        }
        for s in &self.quant {
            s.validate().map_err(as_config)?;
        }
        let mut labels: Vec<String> = self.quant.iter().map(QuantSpec::label).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != self.quant.len() {
            return bad("quant lists the same spec twice");
        }
        self.protocol.validate()?;
        self.runs().map(|_| ())
    }

    pub fn corpus_request(&self) -> CorpusRequest {
        CorpusRequest {
            seed: self.seed,
            n_forget: self.corpus.n_forget,
            n_retain: self.corpus.n_retain,
            n_holdout: self.corpus.n_holdout,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            context_len: self.model.context_len,
            seed: derive_seed(self.seed, "model:target"),
        }
    }

    pub fn retrain_schedule(&self) -> TrainConfig {
        self.retrain.clone().unwrap_or_else(|| self.pretrain.schedule())
    }

    /// The grid in config order.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let grid = &self.unlearn;
        if grid.groups.is_empty() {
            return bad("unlearn.groups is empty");
        }
        let mut out: Vec<RunSpec> = Vec::new();
        for (gi, g) in grid.groups.iter().enumerate() {
            let axis = |name: &str, n: usize| {
                if n == 0 {
                    bad(format!("unlearn.groups[{gi}].{name} is empty"))
                } else {
                    Ok(())
                }
            };
            axis("methods", g.methods.len())?;
            axis("lr", g.lr.len())?;
            axis("epochs", g.epochs.len())?;
            axis("lambda", g.lambda.len())?;
            let loras: Vec<Option<LoraConfig>> = match g.mode {
                Mode::FullFt => {
                    if !(g.rank.is_empty() && g.alpha_ratio.is_empty() && g.targets.is_empty()) {
                        return bad(format!(
                            "unlearn.groups[{gi}]: rank, alpha_ratio and targets apply to lora mode only"
                        ));
                    }
                    vec![None]
                }
                Mode::Lora => {
                    axis("rank", g.rank.len())?;
                    axis("alpha_ratio", g.alpha_ratio.len())?;
                    axis("targets", g.targets.len())?;
                    let mut v = Vec::new();
                    for &rank in &g.rank {
                        for &ratio in &g.alpha_ratio {
                            for &targets in &g.targets {
                                v.push(Some(LoraConfig {
                                    rank,
                                    alpha: ratio * rank as f64,
                                    targets,
                                    init_std: g.init_std,
                                    seed: derive_seed(self.seed, "lora"),
                                }));
                            }
                        }
                    }
                    v
                }
            };
            for &method in &g.methods {
                for &lr in &g.lr {
                    for &epochs in &g.epochs {
                        for &lambda in &g.lambda {
                            for lora in &loras {
                                let config = UnlearnConfig {
                                    method,
                                    lambda,
                                    beta: grid.beta,
                                    lr,
                                    epochs,
                                    mode: g.mode,
                                    lora: lora.clone(),
                                    batch_size: grid.batch_size,
                                    seed: derive_seed(self.seed, "unlearn"),
                                };
                                config.validate().map_err(|e| {
                                    Error::Config(format!("unlearn.groups[{gi}]: {e}"))
                                })?;
                                let id = run_id(&config);
                                if out.iter().any(|r| r.id == id) {
                                    return bad(format!("unlearn grid lists run {id} twice"));
                                }
                                out.push(RunSpec { id, config });
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// File-name-safe identifier spelling out every swept hyperparameter.
pub fn run_id(cfg: &UnlearnConfig) -> String {
    let mut id = format!(
        "{}_{}_lr{}_e{}_lam{}",
        cfg.method,
        cfg.mode.as_str(),
        cfg.lr,
        cfg.epochs,
        cfg.lambda
    );
    if let Some(l) = &cfg.lora {
        id.push_str(&format!("_r{}_a{}_{}", l.rank, l.alpha, l.targets.as_str()));
    }
    id
}

/// Resolve `--out` and `--seed` overrides, then make sure the output
/// directory can be created.
pub fn resolve(mut cfg: ExperimentConfig, out: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    if let Some(o) = out {
        cfg.output_dir = o.to_path_buf();
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        Error::Config(format!("cannot create output directory {}: {e}", cfg.output_dir.display()))
    })?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_covers_six_full_ft_and_four_lora_runs() {
        let runs = ExperimentConfig::default().runs().unwrap();
        assert_eq!(runs.len(), 10);
        assert_eq!(runs.iter().filter(|r| r.config.mode == Mode::Lora).count(), 4);
        assert_eq!(runs[0].id, "GA_full_ft_lr0.0001_e10_lam0");
        assert_eq!(runs[9].id, "NPO_KLR_lora_lr0.003_e4_lam1_r4_a8_all_linear");
    }

    #[test]
    fn shipped_default_config_matches_the_builtin_one() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
        assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn illegal_lambda_is_a_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.unlearn.groups[0].lambda = vec![0.5];
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("lambda")));
    }

    #[test]
    fn empty_axes_and_misplaced_lora_fields_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.unlearn.groups[2].rank.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.unlearn.groups[1].rank = vec![4];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.unlearn.groups.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grid_expands_as_a_cartesian_product_in_config_order() {
        let mut cfg = ExperimentConfig::default();
        cfg.unlearn.groups = vec![GridGroup {
            methods: vec![Method::GaGdr],
            mode: Mode::Lora,
            lr: vec![1e-3, 3e-3],
            epochs: vec![2],
            lambda: vec![1.0],
            rank: vec![2, 4],
            alpha_ratio: vec![0.5, 1.0, 2.0],
            targets: vec![LoraTargets::AllLinear],
            init_std: 0.02,
        }];
        let runs = cfg.runs().unwrap();
        assert_eq!(runs.len(), 12);
        assert_eq!(runs[0].config.lr, 1e-3);
        assert_eq!(runs[0].config.lora.as_ref().unwrap().alpha, 1.0);
        assert_eq!(runs[11].config.lora.as_ref().unwrap().alpha, 8.0);
    }
}
