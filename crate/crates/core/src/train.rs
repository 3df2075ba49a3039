//! Adam and the next-token pretraining loop.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::epoch_batches;
use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::model::{bind_params, nll_loss_graph, BoundAdapters, BoundParams, Checkpoint};
use crate::numerics::{derive_seed, Gradients, Graph, Tensor};

/// Adam without weight decay, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that has a gradient.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2) = (self.beta1, self.beta2);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Gradients of bound model parameters, by parameter name.
pub fn param_grads(p: &BoundParams, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
    p.iter()
        .filter_map(|(name, &id)| grads.take(id).map(|t| (name.clone(), t)))
        .collect()
}

pub fn adapter_key(layer: impl std::fmt::Display, factor: char) -> String {
    format!("adapters/{layer}/{factor}")
}

/// Gradients of bound adapter factors, keyed `adapters/<layer>/A|B`.
pub fn adapter_grads(a: &BoundAdapters, grads: &mut Gradients) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (layer, &(ida, idb, _)) in a.iter() {
        if let Some(t) = grads.take(ida) {
            out.insert(adapter_key(layer, 'A'), t);
        }
        if let Some(t) = grads.take(idb) {
            out.insert(adapter_key(layer, 'B'), t);
        }
    }
    out
}

/// Mutable views of adapter factors under the same keys as [`adapter_grads`].
pub fn adapter_params_mut(set: &mut AdapterSet) -> Vec<(String, &mut Tensor)> {
    let mut out = Vec::new();
    for ad in &mut set.adapters {
        let layer = ad.layer;
        out.push((adapter_key(layer, 'A'), &mut ad.a));
        out.push((adapter_key(layer, 'B'), &mut ad.b));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay.
    #[serde(default = "one")]
    pub final_lr_frac: f64,
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::Config("final_lr_frac must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Minimizes mean next-token cross-entropy over `seqs` for `cfg.steps` Adam
/// steps, reshuffling every epoch.
pub fn train_lm(
    init: &Checkpoint,
    seqs: &[Vec<usize>],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Checkpoint, Vec<TrainLogRow>)> {
    cfg.validate()?;
    let mut ck = init.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok((ck, log));
    }
    if seqs.is_empty() {
        return Err(Error::Input("no training sequences".into()));
    }
    let stream = derive_seed(seed, "train");
    let mut opt = Adam::new(cfg.lr);
    let mut step = 0;
    let mut epoch = 0;
    let mut last_finite = Vec::new();
    'outer: loop {
        for batch in epoch_batches(seqs, cfg.batch_size, stream, epoch)? {
            if step == cfg.steps {
                break 'outer;
            }
            let mut g = Graph::new();
            let p = bind_params(&mut g, &ck, true);
            let loss = nll_loss_graph(&mut g, &ck.config, &p, None, &batch.seqs)?;
            let value = g.scalar(loss);
            let mut grads = g.backward(loss)?;
            let grads = param_grads(&p, &mut grads);
            let norm = global_norm(&grads);
            if !value.is_finite() || !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    message: format!("loss {value}, gradient norm {norm}"),
                    last_finite,
                });
            }
            last_finite.push(value);
            if last_finite.len() > 5 {
                last_finite.remove(0);
            }
            opt.lr = cfg.lr_at(step);
            opt.step(
                ck.params.iter_mut().map(|(k, v)| (k.as_str(), v)),
                &grads,
            );
            log.push(TrainLogRow {
                epoch,
                step,
                loss: value,
                lr: opt.lr,
                grad_norm: norm,
            });
            step += 1;
        }
        epoch += 1;
    }
    Ok((ck, log))
}
