//! Unlearning objectives and the loop that optimizes them.
//!
//! The forgetting term is gradient ascent (`−CE`) or NPO against a frozen
//! reference; the optional retain term is cross-entropy (GDR) or
//! `KL(P_ref ‖ P_θ)` (KLR), weighted by `λ`. Training runs either on every
//! parameter or only on LoRA factors over a frozen base.

mod losses;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use losses::{loss_ga, loss_gdr, loss_klr, loss_npo, total_loss, LossNodes, Policy};

use crate::corpus::{encode_records, epoch_batches, CorpusSplit, Tokenizer};
use crate::error::{Error, Result};
use crate::lora::{attach, merge, AdapterSet, LoraConfig};
use crate::model::{bind_adapters, bind_params, next_token_probs, sequence_log_probs, Checkpoint};
use crate::numerics::{derive_seed, Graph, Tensor};
use crate::train::{adapter_grads, adapter_params_mut, global_norm, param_grads, Adam};

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GA")]
    Ga,
    #[serde(rename = "NPO")]
    Npo,
    #[serde(rename = "GA_GDR")]
    GaGdr,
    #[serde(rename = "GA_KLR")]
    GaKlr,
    #[serde(rename = "NPO_GDR")]
    NpoGdr,
    #[serde(rename = "NPO_KLR")]
    NpoKlr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForgetLoss {
    Ga,
    Npo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetainLoss {
    Gdr,
    Klr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ga,
        Method::Npo,
        Method::GaGdr,
        Method::GaKlr,
        Method::NpoGdr,
        Method::NpoKlr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ga => "GA",
            Method::Npo => "NPO",
            Method::GaGdr => "GA_GDR",
            Method::GaKlr => "GA_KLR",
            Method::NpoGdr => "NPO_GDR",
            Method::NpoKlr => "NPO_KLR",
        }
    }

    pub fn forget_loss(self) -> ForgetLoss {
        match self {
            Method::Ga | Method::GaGdr | Method::GaKlr => ForgetLoss::Ga,
            Method::Npo | Method::NpoGdr | Method::NpoKlr => ForgetLoss::Npo,
        }
    }

    pub fn retain_loss(self) -> Option<RetainLoss> {
        match self {
            Method::Ga | Method::Npo => None,
            Method::GaGdr | Method::NpoGdr => Some(RetainLoss::Gdr),
            Method::GaKlr | Method::NpoKlr => Some(RetainLoss::Klr),
        }
    }

    pub fn needs_reference(self) -> bool {
        self.forget_loss() == ForgetLoss::Npo || self.retain_loss() == Some(RetainLoss::Klr)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FullFt,
    Lora,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::FullFt => "full_ft",
            Mode::Lora => "lora",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_ft" => Ok(Mode::FullFt),
            "lora" => Ok(Mode::Lora),
            _ => Err(Error::Config(format!("unknown mode {s:?}; expected full_ft or lora"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lambda: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub mode: Mode,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite value ≥ 0, got {}", self.lambda));
        }
        if self.method.retain_loss().is_none() && self.lambda != 0.0 {
            return bad(format!("{} has no retain term; lambda must be 0", self.method));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        match (self.mode, &self.lora) {
            (Mode::Lora, None) => bad("lora mode needs a lora section".into()),
            (Mode::FullFt, Some(_)) => bad("a lora section is only valid in lora mode".into()),
            _ => Ok(()),
        }
    }
}

/// Frozen copy of the model being unlearned, with per-sequence caches of
/// the quantities the losses read from it.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    checkpoint: Checkpoint,
    log_prob_sums: HashMap<Vec<usize>, f64>,
    next_probs: HashMap<Vec<usize>, Tensor>,
}

impl ReferenceModel {
    pub fn new(checkpoint: Checkpoint) -> Self {
        Self {
            checkpoint,
            log_prob_sums: HashMap::new(),
            next_probs: HashMap::new(),
        }
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn precompute_log_prob_sums(&mut self, seqs: &[Vec<usize>]) -> Result<()> {
        let sums = self.compute_log_prob_sums(seqs)?;
        self.log_prob_sums.extend(seqs.iter().cloned().zip(sums));
        Ok(())
    }

    pub fn precompute_next_probs(&mut self, seqs: &[Vec<usize>]) -> Result<()> {
        let probs = next_token_probs(&self.checkpoint, seqs, None)?;
        let v = probs.cols();
        let mut off = 0;
        for s in seqs {
            let m = s.len() - 1;
            let rows = Tensor::new(vec![m, v], probs.data()[off * v..(off + m) * v].to_vec())?;
            self.next_probs.insert(s.clone(), rows);
            off += m;
        }
        Ok(())
    }

    fn compute_log_prob_sums(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
        Ok(sequence_log_probs(&self.checkpoint, seqs, None)?
            .iter()
            .map(|lp| lp.iter().sum())
            .collect())
    }

    /// `Σ_t log P_ref(x_t | x_<t)` per sequence.
    pub fn log_prob_sums(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
        if let Some(v) = seqs
            .iter()
            .map(|s| self.log_prob_sums.get(s).copied())
            .collect::<Option<Vec<_>>>()
        {
            return Ok(v);
        }
        self.compute_log_prob_sums(seqs)
    }

    /// Next-token distributions for every predicting position, stacked in
    /// batch order (`m × V`).
    pub fn next_probs(&self, seqs: &[Vec<usize>]) -> Result<Tensor> {
        let cached: Option<Vec<&Tensor>> = seqs.iter().map(|s| self.next_probs.get(s)).collect();
        let Some(parts) = cached else {
            return next_token_probs(&self.checkpoint, seqs, None);
        };
        let v = parts[0].cols();
        let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::new(vec![data.len() / v, v], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_forget: f64,
    pub loss_retain: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

pub fn write_log_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("log row serializes");
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome {
    /// Updated model; in lora mode the adapters merged into the base.
    pub checkpoint: Checkpoint,
    /// Trained adapters over the untouched base (lora mode only).
    pub adapters: Option<AdapterSet>,
    pub log: Vec<UnlearnLogRow>,
}

enum Trainable {
    Full,
    Lora(AdapterSet),
}

pub fn unlearn_run(
    f_target: &Checkpoint,
    split: &CorpusSplit,
    tok: &Tokenizer,
    cfg: &UnlearnConfig,
) -> Result<UnlearnOutcome> {
    cfg.validate()?;
    let forget = encode_records(&split.forget, tok)?;
    let retain = encode_records(&split.retain, tok)?;
    if forget.is_empty() {
        return Err(Error::Input("empty forget set".into()));
    }
    let use_retain = cfg.method.retain_loss().is_some() && cfg.lambda > 0.0;
    if use_retain && retain.is_empty() {
        return Err(Error::Input("empty retain set".into()));
    }

    let mut reference = ReferenceModel::new(f_target.clone());
    if cfg.method.forget_loss() == ForgetLoss::Npo {
        reference.precompute_log_prob_sums(&forget)?;
    }
    if use_retain && cfg.method.retain_loss() == Some(RetainLoss::Klr) {
        reference.precompute_next_probs(&retain)?;
    }

    let mut ck = f_target.clone();
    let mut trainable = match (cfg.mode, &cfg.lora) {
        (Mode::Lora, Some(lc)) => Trainable::Lora(attach(f_target, lc)?),
        _ => Trainable::Full,
    };
    let mut opt = Adam::new(cfg.lr);
    let forget_seed = derive_seed(cfg.seed, "unlearn:forget");
    let retain_seed = derive_seed(cfg.seed, "unlearn:retain");
    let mut retain_epoch = 0;
    let mut retain_queue = Vec::new().into_iter();
    let mut log = Vec::new();
    let mut last_finite: Vec<f64> = Vec::new();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        for fb in epoch_batches(&forget, cfg.batch_size, forget_seed, epoch)? {
            let rb = if use_retain {
                let next = match retain_queue.next() {
                    Some(b) => b,
                    None => {
                        retain_queue = epoch_batches(&retain, cfg.batch_size, retain_seed, retain_epoch)?
                            .into_iter();
                        retain_epoch += 1;
                        retain_queue.next().expect("nonempty retain set")
                    }
                };
                Some(next)
            } else {
                None
            };

            let mut g = Graph::new();
            let (grads, values) = match &trainable {
                Trainable::Full => {
                    let p = bind_params(&mut g, &ck, true);
                    let pol = Policy::new(&ck.config, &p, None);
                    let nodes = total_loss(
                        &mut g,
                        &pol,
                        cfg,
                        &fb.seqs,
                        rb.as_ref().map(|b| b.seqs.as_slice()),
                        &reference,
                    )?;
                    let mut gr = g.backward(nodes.total)?;
                    (param_grads(&p, &mut gr), nodes.values(&g))
                }
                Trainable::Lora(set) => {
                    let p = bind_params(&mut g, &ck, false);
                    let a = bind_adapters(&mut g, set, true);
                    let pol = Policy::new(&ck.config, &p, Some(&a));
                    let nodes = total_loss(
                        &mut g,
                        &pol,
                        cfg,
                        &fb.seqs,
                        rb.as_ref().map(|b| b.seqs.as_slice()),
                        &reference,
                    )?;
                    let mut gr = g.backward(nodes.total)?;
                    (adapter_grads(&a, &mut gr), nodes.values(&g))
                }
            };
            let (lf, lr_, total) = values;
            let norm = global_norm(&grads);
            if !total.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: format!(
                        "{} at epoch {epoch}: total loss {total}, gradient norm {norm}",
                        cfg.method
                    ),
                    last_finite,
                });
            }
            last_finite.push(total);
            if last_finite.len() > 5 {
                last_finite.remove(0);
            }
            match &mut trainable {
                Trainable::Full => {
                    opt.step(ck.params.iter_mut().map(|(k, v)| (k.as_str(), v)), &grads)
                }
                Trainable::Lora(set) => {
                    let mut views = adapter_params_mut(set);
                    opt.step(views.iter_mut().map(|(k, v)| (k.as_str(), &mut **v)), &grads)
                }
            }
            log.push(UnlearnLogRow {
                epoch,
                step,
                loss_forget: lf,
                loss_retain: lr_,
                total,
                grad_norm: norm,
            });
            step += 1;
        }
    }

    match trainable {
        Trainable::Full => Ok(UnlearnOutcome {
            checkpoint: ck.with_provenance_suffix(&format!(":{}-full_ft", cfg.method)),
            adapters: None,
            log,
        }),
        Trainable::Lora(set) => {
            check_frozen(f_target, &ck)?;
            let merged = merge(&ck, &set)?;
            let merged = Checkpoint {
                provenance: format!("{}:{}-lora:merged", f_target.provenance, cfg.method),
                ..merged
            };
            Ok(UnlearnOutcome {
                checkpoint: merged,
                adapters: Some(set),
                log,
            })
        }
    }
}

/// Errors unless every base tensor is bit-identical.
pub fn check_frozen(before: &Checkpoint, after: &Checkpoint) -> Result<()> {
    for (name, t) in &before.params {
        let same = after.params.get(name).is_some_and(|u| {
            u.shape() == t.shape()
                && u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });
        if !same {
            return Err(Error::Contract(format!(
                "frozen base parameter {name} changed during lora-mode training"
            )));
        }
    }
    Ok(())
}

/// Per-epoch means of the logged losses.
pub fn epoch_summary(log: &[UnlearnLogRow]) -> BTreeMap<usize, (f64, Option<f64>, f64)> {
    let mut acc: BTreeMap<usize, (f64, f64, f64, usize)> = BTreeMap::new();
    let mut has_retain = false;
    for r in log {
        let e = acc.entry(r.epoch).or_default();
        e.0 += r.loss_forget;
        e.1 += r.loss_retain.unwrap_or(0.0);
        e.2 += r.total;
        e.3 += 1;
        has_retain |= r.loss_retain.is_some();
    }
    acc.into_iter()
        .map(|(k, (f, r, t, n))| {
            let n = n as f64;
            (k, (f / n, has_retain.then_some(r / n), t / n))
        })
        .collect()
}
