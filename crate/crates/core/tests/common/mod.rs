#![allow(dead_code)]

use quant_unlearn::lora::{attach, AdapterSet, LoraConfig, LoraTargets};
use quant_unlearn::model::{
    bind_adapters, bind_params, init_model, next_token_probs, nll_loss_graph, sequence_log_probs, Checkpoint,
    ModelConfig,
};
use quant_unlearn::numerics::{grad_check, seeded_rng, Graph, NodeId, Tensor};
use quant_unlearn::unlearn::{loss_ga, loss_gdr, loss_klr, loss_npo, Policy};
use quant_unlearn::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        context_len: 8,
        seed,
    }
}

/// A tiny model with O(1) weights, so finite differences are not swamped
/// by rounding.
pub fn tiny_model(seed: u64) -> Checkpoint {
    let mut ck = init_model(&tiny_config(seed)).unwrap();
    let mut rng = seeded_rng(seed ^ 0x9e37);
    for (name, t) in ck.params.iter_mut() {
        let noise = Tensor::randn(t.shape(), if name.ends_with(".gain") || name.ends_with(".bias") { 0.2 } else { 0.4 }, &mut rng);
        *t = if name.ends_with(".gain") {
            noise.map(|x| 1.0 + x)
        } else {
            noise
        };
    }
    ck
}

pub fn tiny_batch() -> Vec<Vec<usize>> {
    vec![vec![0, 3, 4, 5, 6, 1], vec![0, 7, 8, 1], vec![0, 5, 3, 2, 4, 7, 8]]
}

pub fn tiny_adapters(ck: &Checkpoint, targets: LoraTargets) -> AdapterSet {
    let mut set = attach(
        ck,
        &LoraConfig {
            rank: 2,
            alpha: 4.0,
            targets,
            init_std: 0.3,
            seed: 5,
        },
    )
    .unwrap();
    let mut rng = seeded_rng(17);
    for ad in &mut set.adapters {
        ad.b = Tensor::randn(ad.b.shape(), 0.3, &mut rng);
    }
    set
}

/// `Σ y ⊙ W` with a fixed random `W`, so every output coordinate matters.
pub fn weighted_sum(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut seeded_rng(99));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut seeded_rng(seed))
}

type Probe = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

/// Every graph primitive, probed on each differentiable input in turn.
pub fn primitive_probes() -> Vec<(&'static str, Tensor, Probe)> {
    let a34 = randn(&[3, 4], 1);
    let b45 = randn(&[4, 5], 2);
    let b54 = randn(&[5, 4], 3);
    let c34 = randn(&[3, 4], 4);
    let dist = Tensor::from_rows(&[&[0.1, 0.2, 0.3, 0.4], &[0.25, 0.25, 0.25, 0.25], &[0.7, 0.0, 0.2, 0.1]]);
    let qkv = randn(&[7, 4], 5);
    let seg = vec![4usize, 3];
    let mut probes: Vec<(&'static str, Tensor, Probe)> = Vec::new();
    {
        let b = b45.clone();
        probes.push(("matmul/lhs", a34.clone(), Box::new(move |g, x| {
            let c = g.constant(b.clone());
            let y = g.matmul(x, c)?;
            weighted_sum(g, y)
        })));
    }
    {
        let a = a34.clone();
        probes.push(("matmul/rhs", b45.clone(), Box::new(move |g, x| {
            let c = g.constant(a.clone());
            let y = g.matmul(c, x)?;
            weighted_sum(g, y)
        })));
    }
    {
        let b = b54.clone();
        probes.push(("matmul_nt/lhs", a34.clone(), Box::new(move |g, x| {
            let c = g.constant(b.clone());
            let y = g.matmul_nt(x, c)?;
            weighted_sum(g, y)
        })));
    }
    {
        let a = a34.clone();
        probes.push(("matmul_nt/rhs", b54.clone(), Box::new(move |g, x| {
            let c = g.constant(a.clone());
            let y = g.matmul_nt(c, x)?;
            weighted_sum(g, y)
        })));
    }
    for (name, op) in [("add", 0u8), ("sub/lhs", 1), ("mul/lhs", 2)] {
        let c = c34.clone();
        probes.push((name, a34.clone(), Box::new(move |g, x| {
            let k = g.constant(c.clone());
            let y = match op {
                0 => g.add(x, k)?,
                1 => g.sub(x, k)?,
                _ => g.mul(x, k)?,
            };
            weighted_sum(g, y)
        })));
    }
    for (name, op) in [("sub/rhs", 1u8), ("mul/rhs", 2)] {
        let c = c34.clone();
        probes.push((name, a34.clone(), Box::new(move |g, x| {
            let k = g.constant(c.clone());
            let y = if op == 1 { g.sub(k, x)? } else { g.mul(k, x)? };
            weighted_sum(g, y)
        })));
    }
    probes.push(("scale", a34.clone(), Box::new(|g, x| {
        let y = g.scale(x, -1.7);
        weighted_sum(g, y)
    })));
    probes.push(("sum", a34.clone(), Box::new(|g, x| {
        let sq = g.mul(x, x)?;
        Ok(g.sum(sq))
    })));
    probes.push(("mean", a34.clone(), Box::new(|g, x| {
        let sq = g.mul(x, x)?;
        Ok(g.mean(sq))
    })));
    probes.push(("softmax_rows", a34.clone(), Box::new(|g, x| {
        let y = g.softmax_rows(x);
        weighted_sum(g, y)
    })));
    probes.push(("log_softmax_rows", a34.clone(), Box::new(|g, x| {
        let y = g.log_softmax_rows(x);
        weighted_sum(g, y)
    })));
    {
        let (gain, bias) = (randn(&[4], 6), randn(&[4], 7));
        probes.push(("layer_norm/x", a34.clone(), Box::new(move |g, x| {
            let (gn, bn) = (g.constant(gain.clone()), g.constant(bias.clone()));
            let y = g.layer_norm(x, gn, bn)?;
            weighted_sum(g, y)
        })));
    }
    {
        let bias = randn(&[4], 7);
        let a = a34.clone();
        probes.push(("layer_norm/gain", randn(&[4], 6), Box::new(move |g, x| {
            let (an, bn) = (g.constant(a.clone()), g.constant(bias.clone()));
            let y = g.layer_norm(an, x, bn)?;
            weighted_sum(g, y)
        })));
    }
    {
        let gain = randn(&[4], 6);
        let a = a34.clone();
        probes.push(("layer_norm/bias", randn(&[4], 7), Box::new(move |g, x| {
            let (an, gn) = (g.constant(a.clone()), g.constant(gain.clone()));
            let y = g.layer_norm(an, gn, x)?;
            weighted_sum(g, y)
        })));
    }
    probes.push(("gelu", a34.clone(), Box::new(|g, x| {
        let y = g.gelu(x);
        weighted_sum(g, y)
    })));
    probes.push(("gather_rows", a34.clone(), Box::new(|g, x| {
        let y = g.gather_rows(x, &[2, 0, 2, 1, 2])?;
        weighted_sum(g, y)
    })));
    for (name, which) in [("causal_attention/q", 0u8), ("causal_attention/k", 1), ("causal_attention/v", 2)] {
        let (q, k, v) = (qkv.clone(), randn(&[7, 4], 8), randn(&[7, 4], 9));
        let seg = seg.clone();
        let x0 = [q.clone(), k.clone(), v.clone()][which as usize].clone();
        probes.push((name, x0, Box::new(move |g, x| {
            let mut ids = [g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())];
            ids[which as usize] = x;
            let y = g.causal_attention(ids[0], ids[1], ids[2], &seg, 2)?;
            weighted_sum(g, y)
        })));
    }
    probes.push(("cross_entropy", a34.clone(), Box::new(|g, x| g.cross_entropy(x, &[3, 0, 1]))));
    {
        let p = dist.clone();
        probes.push(("kl_divergence_rows", a34.clone(), Box::new(move |g, x| {
            let lq = g.log_softmax_rows(x);
            g.kl_divergence_rows(&p, lq)
        })));
    }
    probes.push(("log_sigmoid", a34.clone(), Box::new(|g, x| {
        let y = g.log_sigmoid(x);
        weighted_sum(g, y)
    })));
    probes.push(("pick_cols", a34.clone(), Box::new(|g, x| {
        let y = g.pick_cols(x, &[1, 3, 0])?;
        weighted_sum(g, y)
    })));
    probes.push(("segment_sum", randn(&[7], 10), Box::new(|g, x| {
        let y = g.segment_sum(x, &[2, 4, 1])?;
        weighted_sum(g, y)
    })));
    probes
}

pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    primitive_probes()
        .into_iter()
        .map(|(name, x, f)| (name, grad_check(|g, n| f(g, n), &x, FD_STEP).unwrap()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Nll,
    Ga,
    Npo,
    Gdr,
    Klr,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Nll, LossKind::Ga, LossKind::Npo, LossKind::Gdr, LossKind::Klr];
}

/// Worst finite-difference error of `kind` over every model parameter, and
/// over the adapter factors when `with_adapters` is set.
pub fn loss_error(kind: LossKind, with_adapters: bool) -> f64 {
    let ck = tiny_model(1);
    let reference = tiny_model(2);
    let batch = tiny_batch();
    let retain = vec![vec![0, 6, 5, 4, 1], vec![0, 8, 7, 3, 1]];
    let ref_lp: Vec<f64> = sequence_log_probs(&reference, &batch, None)
        .unwrap()
        .iter()
        .map(|v| v.iter().sum())
        .collect();
    let p_ref = next_token_probs(&reference, &retain, None).unwrap();
    let adapters = with_adapters.then(|| tiny_adapters(&ck, LoraTargets::AllLinear));

    let record = |g: &mut Graph, pol: &Policy| -> Result<NodeId> {
        match kind {
            LossKind::Nll => nll_loss_graph(g, pol.cfg, pol.params, pol.adapters, &batch),
            LossKind::Ga => loss_ga(g, pol, &batch),
            LossKind::Npo => loss_npo(g, pol, &batch, &ref_lp, 0.5),
            LossKind::Gdr => loss_gdr(g, pol, &retain),
            LossKind::Klr => loss_klr(g, pol, &retain, &p_ref),
        }
    };

    let mut worst = 0.0f64;
    for (name, t) in &ck.params {
        let err = grad_check(
            |g, x| {
                let mut p = bind_params(g, &ck, false);
                p.replace(name, x)?;
                let a = adapters.as_ref().map(|s| bind_adapters(g, s, false));
                record(g, &Policy::new(&ck.config, &p, a.as_ref()))
            },
            t,
            FD_STEP,
        )
        .unwrap();
        worst = worst.max(err);
    }
    if let Some(set) = &adapters {
        for ad in &set.adapters {
            for (factor, t) in [('A', &ad.a), ('B', &ad.b)] {
                let err = grad_check(
                    |g, x| {
                        let p = bind_params(g, &ck, false);
                        let mut a = bind_adapters(g, set, false);
                        a.replace(ad.layer, factor, x)?;
                        record(g, &Policy::new(&ck.config, &p, Some(&a)))
                    },
                    t,
                    FD_STEP,
                )
                .unwrap();
                worst = worst.max(err);
            }
        }
    }
    worst
}
