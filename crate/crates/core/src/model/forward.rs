use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lora::AdapterSet;
use crate::numerics::{Graph, NodeId, Tensor};

use super::{Checkpoint, LayerId, ModelConfig, Role};

/// Model parameters recorded on a graph, by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    nodes: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes.get(name).copied().ok_or_else(|| Error::Schema {
            name: name.to_string(),
            message: "not bound on graph".into(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.nodes.iter()
    }

    /// Point `name` at another node, e.g. a probe in a gradient check.
    pub fn replace(&mut self, name: &str, id: NodeId) -> Result<()> {
        let slot = self.nodes.get_mut(name).ok_or_else(|| Error::Schema {
            name: name.to_string(),
            message: "not bound on graph".into(),
        })?;
        *slot = id;
        Ok(())
    }
}

/// Record every checkpoint parameter as a leaf; `trainable` decides
/// whether gradients flow into them.
pub fn bind_params(g: &mut Graph, ck: &Checkpoint, trainable: bool) -> BoundParams {
    let nodes = ck
        .params
        .iter()
        .map(|(name, t)| {
            let id = if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            };
            (name.clone(), id)
        })
        .collect();
    BoundParams { nodes }
}

/// Low-rank factors recorded on a graph: layer → (A, B, α/r).
#[derive(Debug, Clone, Default)]
pub struct BoundAdapters {
    layers: BTreeMap<LayerId, (NodeId, NodeId, f64)>,
}

impl BoundAdapters {
    pub fn get(&self, layer: LayerId) -> Option<(NodeId, NodeId, f64)> {
        self.layers.get(&layer).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &(NodeId, NodeId, f64))> {
        self.layers.iter()
    }

    /// Point factor `A` or `B` of `layer` at another node.
    pub fn replace(&mut self, layer: LayerId, factor: char, id: NodeId) -> Result<()> {
        let slot = self
            .layers
            .get_mut(&layer)
            .ok_or_else(|| Error::Contract(format!("no adapter bound for {layer}")))?;
        match factor {
            'A' => slot.0 = id,
            'B' => slot.1 = id,
            _ => return Err(Error::Contract(format!("adapter factor must be A or B, got {factor}"))),
        }
        Ok(())
    }
}

pub fn bind_adapters(g: &mut Graph, set: &AdapterSet, trainable: bool) -> BoundAdapters {
    let mut layers = BTreeMap::new();
    for ad in &set.adapters {
        let (a, b) = if trainable {
            (g.param(ad.a.clone()), g.param(ad.b.clone()))
        } else {
            (g.constant(ad.a.clone()), g.constant(ad.b.clone()))
        };
        layers.insert(ad.layer, (a, b, ad.scaling()));
    }
    BoundAdapters { layers }
}

/// Variable-length sequences stacked along rows, without padding.
#[derive(Debug, Clone)]
pub struct Packed {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<usize>,
}

impl Packed {
    pub fn new(seqs: &[Vec<usize>], cfg: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Input("empty sequence".into()));
            }
            if s.len() > cfg.context_len {
                return Err(Error::Input(format!(
                    "sequence length {} exceeds context length {}",
                    s.len(),
                    cfg.context_len
                )));
            }
            if let Some(&bad) = s.iter().find(|&&t| t >= cfg.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
            segments.push(s.len());
        }
        Ok(Self {
            ids,
            positions,
            segments,
        })
    }

    /// Rows that predict a next token, the tokens they predict, and how many
    /// such rows each sequence contributes.
    pub fn next_token_targets(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut counts = Vec::with_capacity(self.segments.len());
        let mut off = 0;
        for &len in &self.segments {
            for t in 0..len - 1 {
                rows.push(off + t);
                targets.push(self.ids[off + t + 1]);
            }
            counts.push(len - 1);
            off += len;
        }
        (rows, targets, counts)
    }

    pub fn last_rows(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.segments.len());
        let mut off = 0;
        for &len in &self.segments {
            off += len;
            out.push(off - 1);
        }
        out
    }
}

fn linear(
    g: &mut Graph,
    x: NodeId,
    p: &BoundParams,
    adapters: Option<&BoundAdapters>,
    layer: LayerId,
) -> Result<NodeId> {
    let w = p.get(&layer.param_name())?;
    let base = g.matmul_nt(x, w)?;
    match adapters.and_then(|a| a.get(layer)) {
        None => Ok(base),
        Some((a, b, scaling)) => {
            let xa = g.matmul_nt(x, a)?;
            let xab = g.matmul_nt(xa, b)?;
            let delta = g.scale(xab, scaling);
            g.add(base, delta)
        }
    }
}

/// Final normalized hidden states, `N × d`.
pub fn forward_hidden(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    adapters: Option<&BoundAdapters>,
    packed: &Packed,
) -> Result<NodeId> {
    let tok = g.gather_rows(p.get("tok_emb")?, &packed.ids)?;
    let pos = g.gather_rows(p.get("pos_emb")?, &packed.positions)?;
    let mut x = g.add(tok, pos)?;
    for b in 0..cfg.n_layers {
        let h = g.layer_norm(
            x,
            p.get(&format!("blocks.{b}.ln1.gain"))?,
            p.get(&format!("blocks.{b}.ln1.bias"))?,
        )?;
        let q = linear(g, h, p, adapters, LayerId::new(b, Role::AttnQ))?;
        let k = linear(g, h, p, adapters, LayerId::new(b, Role::AttnK))?;
        let v = linear(g, h, p, adapters, LayerId::new(b, Role::AttnV))?;
        let att = g.causal_attention(q, k, v, &packed.segments, cfg.n_heads)?;
        let o = linear(g, att, p, adapters, LayerId::new(b, Role::AttnO))?;
        x = g.add(x, o)?;

        let h = g.layer_norm(
            x,
            p.get(&format!("blocks.{b}.ln2.gain"))?,
            p.get(&format!("blocks.{b}.ln2.bias"))?,
        )?;
        let up = linear(g, h, p, adapters, LayerId::new(b, Role::MlpUp))?;
        let act = g.gelu(up);
        let down = linear(g, act, p, adapters, LayerId::new(b, Role::MlpDown))?;
        x = g.add(x, down)?;
    }
    g.layer_norm(x, p.get("ln_f.gain")?, p.get("ln_f.bias")?)
}

fn head_on_rows(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    adapters: Option<&BoundAdapters>,
    hidden: NodeId,
    rows: &[usize],
) -> Result<NodeId> {
    let sel = g.gather_rows(hidden, rows)?;
    linear(g, sel, p, adapters, LayerId::lm_head(cfg))
}

/// Logits at every position that predicts a next token (`m × V`), with the
/// predicted tokens and the per-sequence row counts.
pub fn next_token_logits_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    adapters: Option<&BoundAdapters>,
    seqs: &[Vec<usize>],
) -> Result<(NodeId, Vec<usize>, Vec<usize>)> {
    let packed = Packed::new(seqs, cfg)?;
    let (rows, targets, counts) = packed.next_token_targets();
    if rows.is_empty() {
        return Err(Error::Contract("no sequence has a next token".into()));
    }
    let hidden = forward_hidden(g, cfg, p, adapters, &packed)?;
    let logits = head_on_rows(g, cfg, p, adapters, hidden, &rows)?;
    Ok((logits, targets, counts))
}

/// Mean next-token cross-entropy over every predicted position.
pub fn nll_loss_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    adapters: Option<&BoundAdapters>,
    seqs: &[Vec<usize>],
) -> Result<NodeId> {
    let (logits, targets, _) = next_token_logits_graph(g, cfg, p, adapters, seqs)?;
    g.cross_entropy(logits, &targets)
}

/// Log-probability of every next token (`[m]`) and the per-sequence counts.
pub fn token_log_probs_graph(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &BoundParams,
    adapters: Option<&BoundAdapters>,
    seqs: &[Vec<usize>],
) -> Result<(NodeId, Vec<usize>)> {
    if seqs.iter().any(|s| s.len() < 2) {
        return Err(Error::Contract(
            "every sequence needs at least two tokens".into(),
        ));
    }
    let (logits, targets, counts) = next_token_logits_graph(g, cfg, p, adapters, seqs)?;
    let logp = g.log_softmax_rows(logits);
    Ok((g.pick_cols(logp, &targets)?, counts))
}

fn bind_all(
    g: &mut Graph,
    ck: &Checkpoint,
    adapters: Option<&AdapterSet>,
) -> (BoundParams, Option<BoundAdapters>) {
    let p = bind_params(g, ck, false);
    let a = adapters.map(|set| bind_adapters(g, set, false));
    (p, a)
}

/// Logits for every position of one sequence, `len × V`.
pub fn forward_logits(
    ck: &Checkpoint,
    tokens: &[usize],
    adapters: Option<&AdapterSet>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (p, a) = bind_all(&mut g, ck, adapters);
    let packed = Packed::new(&[tokens.to_vec()], &ck.config)?;
    let hidden = forward_hidden(&mut g, &ck.config, &p, a.as_ref(), &packed)?;
    let rows: Vec<usize> = (0..tokens.len()).collect();
    let logits = head_on_rows(&mut g, &ck.config, &p, a.as_ref(), hidden, &rows)?;
    Ok(g.value(logits).clone())
}

pub fn nll_loss(ck: &Checkpoint, seqs: &[Vec<usize>], adapters: Option<&AdapterSet>) -> Result<f64> {
    let mut g = Graph::new();
    let (p, a) = bind_all(&mut g, ck, adapters);
    let loss = nll_loss_graph(&mut g, &ck.config, &p, a.as_ref(), seqs)?;
    Ok(g.scalar(loss))
}

/// Next-token distributions at every predicting position, `m × V`.
pub fn next_token_probs(
    ck: &Checkpoint,
    seqs: &[Vec<usize>],
    adapters: Option<&AdapterSet>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (p, a) = bind_all(&mut g, ck, adapters);
    let (logits, _, _) = next_token_logits_graph(&mut g, &ck.config, &p, a.as_ref(), seqs)?;
    Ok(g.value(logits).softmax_rows())
}

/// Per-token next-token log-probabilities for each sequence.
pub fn sequence_log_probs(
    ck: &Checkpoint,
    seqs: &[Vec<usize>],
    adapters: Option<&AdapterSet>,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let (p, a) = bind_all(&mut g, ck, adapters);
    let (lp, counts) = token_log_probs_graph(&mut g, &ck.config, &p, a.as_ref(), seqs)?;
    let data = g.value(lp).data();
    let mut out = Vec::with_capacity(counts.len());
    let mut off = 0;
    for c in counts {
        out.push(data[off..off + c].to_vec());
        off += c;
    }
    Ok(out)
}

pub fn greedy_decode(
    ck: &Checkpoint,
    prompt: &[usize],
    n_new: usize,
    adapters: Option<&AdapterSet>,
) -> Result<Vec<usize>> {
    let mut out = greedy_decode_batch(ck, &[prompt.to_vec()], &[n_new], adapters)?;
    Ok(out.pop().expect("one sequence in, one out"))
}

/// Greedy continuation of several prompts at once; `n_new[i]` tokens are
/// appended to prompt `i`. Argmax ties go to the lowest token id.
pub fn greedy_decode_batch(
    ck: &Checkpoint,
    prompts: &[Vec<usize>],
    n_new: &[usize],
    adapters: Option<&AdapterSet>,
) -> Result<Vec<Vec<usize>>> {
    if prompts.len() != n_new.len() {
        return Err(Error::Contract("one continuation length per prompt".into()));
    }
    for (p, &n) in prompts.iter().zip(n_new) {
        if p.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        if p.len() + n > ck.config.context_len {
            return Err(Error::Input(format!(
                "prompt length {} plus {n} new tokens exceeds context length {}",
                p.len(),
                ck.config.context_len
            )));
        }
    }
    let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
    let steps = n_new.iter().copied().max().unwrap_or(0);
    if steps == 0 {
        return Ok(seqs);
    }
    let mut g = Graph::new();
    let (p, a) = bind_all(&mut g, ck, adapters);
    let base_len = g.len();
    for step in 0..steps {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| n_new[i] > step).collect();
        let batch: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
        let packed = Packed::new(&batch, &ck.config)?;
        let hidden = forward_hidden(&mut g, &ck.config, &p, a.as_ref(), &packed)?;
        let logits = head_on_rows(&mut g, &ck.config, &p, a.as_ref(), hidden, &packed.last_rows())?;
        let lt = g.value(logits);
        let next: Vec<usize> = (0..active.len()).map(|r| argmax(lt.row(r))).collect();
        for (&i, t) in active.iter().zip(next) {
            seqs[i].push(t);
        }
        g.truncate(base_len);
    }
    Ok(seqs)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
