use crate::error::{Error, Result};
use crate::model::{
    next_token_logits_graph, nll_loss_graph, token_log_probs_graph, BoundAdapters, BoundParams,
    ModelConfig,
};
use crate::numerics::{Graph, NodeId, Tensor};

use super::{ForgetLoss, ReferenceModel, RetainLoss, UnlearnConfig};

/// The model being optimized, as bound on a graph.
#[derive(Clone, Copy)]
pub struct Policy<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a BoundParams,
    pub adapters: Option<&'a BoundAdapters>,
}

impl<'a> Policy<'a> {
    pub fn new(
        cfg: &'a ModelConfig,
        params: &'a BoundParams,
        adapters: Option<&'a BoundAdapters>,
    ) -> Self {
        Self {
            cfg,
            params,
            adapters,
        }
    }
}

/// `−CE` on the forget batch.
pub fn loss_ga(g: &mut Graph, pol: &Policy, forget: &[Vec<usize>]) -> Result<NodeId> {
    let ce = nll_loss_graph(g, pol.cfg, pol.params, pol.adapters, forget)?;
    Ok(g.scale(ce, -1.0))
}

/// `−(2/β)·mean log σ(−β·(log P_θ(x) − log P_ref(x)))` with sequence-level
/// log-probabilities; `ref_log_probs` holds `log P_ref(x)` per sequence.
pub fn loss_npo(
    g: &mut Graph,
    pol: &Policy,
    forget: &[Vec<usize>],
    ref_log_probs: &[f64],
    beta: f64,
) -> Result<NodeId> {
    if !(beta > 0.0) {
        return Err(Error::Contract(format!("NPO needs beta > 0, got {beta}")));
    }
    if ref_log_probs.len() != forget.len() {
        return Err(Error::dim("loss_npo", &[forget.len()], &[ref_log_probs.len()]));
    }
    let (lp, counts) = token_log_probs_graph(g, pol.cfg, pol.params, pol.adapters, forget)?;
    let seq = g.segment_sum(lp, &counts)?;
    let reference = g.constant(Tensor::new(vec![forget.len()], ref_log_probs.to_vec())?);
    let ratio = g.sub(seq, reference)?;
    let z = g.scale(ratio, -beta);
    let ls = g.log_sigmoid(z);
    let m = g.mean(ls);
    Ok(g.scale(m, -2.0 / beta))
}

/// Cross-entropy on the retain batch.
pub fn loss_gdr(g: &mut Graph, pol: &Policy, retain: &[Vec<usize>]) -> Result<NodeId> {
    nll_loss_graph(g, pol.cfg, pol.params, pol.adapters, retain)
}

/// Mean over retain positions of `KL(P_ref ‖ P_θ)`; `p_ref` holds the
/// reference next-token distributions for those positions.
pub fn loss_klr(
    g: &mut Graph,
    pol: &Policy,
    retain: &[Vec<usize>],
    p_ref: &Tensor,
) -> Result<NodeId> {
    let (logits, _, _) = next_token_logits_graph(g, pol.cfg, pol.params, pol.adapters, retain)?;
    let lq = g.log_softmax_rows(logits);
    g.kl_divergence_rows(p_ref, lq)
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub forget: NodeId,
    pub retain: Option<NodeId>,
    pub total: NodeId,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> (f64, Option<f64>, f64) {
        (
            g.scalar(self.forget),
            self.retain.map(|r| g.scalar(r)),
            g.scalar(self.total),
        )
    }
}

/// `L_forget + λ·L_retain` for the configured method.
pub fn total_loss(
    g: &mut Graph,
    pol: &Policy,
    cfg: &UnlearnConfig,
    forget: &[Vec<usize>],
    retain: Option<&[Vec<usize>]>,
    reference: &ReferenceModel,
) -> Result<LossNodes> {
    let lf = match cfg.method.forget_loss() {
        ForgetLoss::Ga => loss_ga(g, pol, forget)?,
        ForgetLoss::Npo => {
            let r = reference.log_prob_sums(forget)?;
            loss_npo(g, pol, forget, &r, cfg.beta)?
        }
    };
    let Some(kind) = cfg.method.retain_loss().filter(|_| cfg.lambda > 0.0) else {
        return Ok(LossNodes {
            forget: lf,
            retain: None,
            total: lf,
        });
    };
    let retain = retain.ok_or_else(|| {
        Error::Contract(format!("{} with lambda {} needs a retain batch", cfg.method, cfg.lambda))
    })?;
    let lr = match kind {
        RetainLoss::Gdr => loss_gdr(g, pol, retain)?,
        RetainLoss::Klr => {
            let p = reference.next_probs(retain)?;
            loss_klr(g, pol, retain, &p)?
        }
    };
    let weighted = g.scale(lr, cfg.lambda);
    let total = g.add(lf, weighted)?;
    Ok(LossNodes {
        forget: lf,
        retain: Some(lr),
        total,
    })
}
