//! Memorization, utility and membership-leakage metrics.
//!
//! Generation-based scores use greedy decoding with the continuation length
//! set to the reference length and are reported on a 0–100 scale. PrivLeak
//! compares a Min-K% Prob membership attack against the same attack on a
//! model retrained without the forget set.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{FactRecord, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{greedy_decode_batch, sequence_log_probs, Checkpoint};

pub const DEFAULT_K_PERCENT: f64 = 20.0;

/// LCS-based ROUGE-L F1; an empty candidate scores 0.
pub fn rouge_l_f1<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut prev = vec![0usize; reference.len() + 1];
    let mut cur = vec![0usize; reference.len() + 1];
    for c in candidate {
        for (j, r) in reference.iter().enumerate() {
            cur[j + 1] = if c == r {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let lcs = prev[reference.len()] as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// How many sentence tokens VerMem uses as the prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixLen {
    /// `⌈|x|/2⌉`
    HalfCeil,
    Fixed(usize),
}

impl PrefixLen {
    pub fn for_len(self, n: usize) -> usize {
        match self {
            PrefixLen::HalfCeil => n.div_ceil(2),
            PrefixLen::Fixed(l) => l,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub prefix: PrefixLen,
    pub k_percent: f64,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            prefix: PrefixLen::HalfCeil,
            k_percent: DEFAULT_K_PERCENT,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(Error::Config(format!(
                "k_percent must lie in (0, 100], got {}",
                self.k_percent
            )));
        }
        if self.prefix == PrefixLen::Fixed(0) {
            return Err(Error::Config("fixed prefix length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Mean ROUGE-L F1 (×100) of greedy continuations against their references.
fn mean_continuation_rouge(
    ck: &Checkpoint,
    prompts: Vec<Vec<usize>>,
    references: Vec<Vec<usize>>,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Input("no records to evaluate".into()));
    }
    let n_new: Vec<usize> = references.iter().map(Vec::len).collect();
    let out = greedy_decode_batch(ck, &prompts, &n_new, None)?;
    let total: f64 = out
        .iter()
        .zip(&prompts)
        .zip(&references)
        .map(|((seq, p), r)| rouge_l_f1(&seq[p.len()..], r))
        .sum();
    Ok(100.0 * total / prompts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerMem {
    pub score: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Verbatim memorization: prompt with the first `l` sentence tokens, score
/// the greedy continuation against the rest.
pub fn vermem(
    ck: &Checkpoint,
    records: &[FactRecord],
    tok: &Tokenizer,
    prefix: PrefixLen,
) -> Result<VerMem> {
    let mut prompts = Vec::new();
    let mut refs = Vec::new();
    let mut skipped = 0;
    for r in records {
        let x = tok.encode(&r.sentence)?;
        let l = prefix.for_len(x.len());
        if l == 0 || l >= x.len() {
            log::warn!("sentence of {} tokens too short for prefix {l}: {}", x.len(), r.sentence);
            skipped += 1;
            continue;
        }
        let mut p = vec![tok.bos()];
        p.extend_from_slice(&x[..l]);
        prompts.push(p);
        refs.push(x[l..].to_vec());
    }
    let evaluated = prompts.len();
    let score = if evaluated == 0 {
        0.0
    } else {
        mean_continuation_rouge(ck, prompts, refs)?
    };
    Ok(VerMem {
        score,
        evaluated,
        skipped,
    })
}

/// QA knowledge: greedy answer to each question scored against the answer.
pub fn knowmem(ck: &Checkpoint, records: &[FactRecord], tok: &Tokenizer) -> Result<f64> {
    let mut prompts = Vec::with_capacity(records.len());
    let mut refs = Vec::with_capacity(records.len());
    for r in records {
        let mut p = vec![tok.bos()];
        p.extend(tok.encode(&r.question)?);
        prompts.push(p);
        refs.push(tok.encode(&r.answer)?);
    }
    mean_continuation_rouge(ck, prompts, refs)
}

/// KnowMem on the retain set.
pub fn utilitypres(ck: &Checkpoint, retain: &[FactRecord], tok: &Tokenizer) -> Result<f64> {
    knowmem(ck, retain, tok)
}

/// Mean of the lowest `⌈k%·n⌉` token log-probabilities.
pub fn min_k_of(log_probs: &[f64], k_percent: f64) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Contract("Min-K% needs at least one scored token".into()));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Contract(format!("k_percent {k_percent} outside (0, 100]")));
    }
    let mut v = log_probs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = ((k_percent / 100.0 * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[..n].iter().sum::<f64>() / n as f64)
}

/// Min-K% Prob of one token sequence under `ck`.
pub fn min_k_prob(ck: &Checkpoint, seq: &[usize], k_percent: f64) -> Result<f64> {
    if seq.len() < 2 {
        return Err(Error::Contract(format!(
            "Min-K% needs a sequence of at least 2 tokens, got {}",
            seq.len()
        )));
    }
    let lp = sequence_log_probs(ck, &[seq.to_vec()], None)?;
    min_k_of(&lp[0], k_percent)
}

/// Min-K% scores of each record's framed sentence.
pub fn min_k_scores(
    ck: &Checkpoint,
    records: &[FactRecord],
    tok: &Tokenizer,
    k_percent: f64,
) -> Result<Vec<f64>> {
    let seqs = records
        .iter()
        .map(|r| tok.encode_framed(&r.sentence))
        .collect::<Result<Vec<_>>>()?;
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    sequence_log_probs(ck, &seqs, None)?
        .iter()
        .map(|lp| min_k_of(lp, k_percent))
        .collect()
}

/// Mann–Whitney AUC: the chance a member outscores a non-member, ties ½.
pub fn auc_roc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Contract("AUC needs nonempty member and non-member scores".into()));
    }
    let mut wins = 0.0;
    for &m in members {
        for &n in nonmembers {
            if m > n {
                wins += 1.0;
            } else if m == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (members.len() * nonmembers.len()) as f64)
}

/// `(AUC_u − AUC_r) / AUC_r × 100`.
pub fn privleak_from_auc(auc_unlearn: f64, auc_retrain: f64) -> Result<f64> {
    if auc_retrain <= 0.0 {
        return Err(Error::UndefinedMetric(format!(
            "retrained model's AUC is {auc_retrain}; PrivLeak divides by it"
        )));
    }
    Ok((auc_unlearn - auc_retrain) / auc_retrain * 100.0)
}

/// Min-K% AUC of `members` against `nonmembers` for one model.
pub fn mia_auc(
    ck: &Checkpoint,
    members: &[FactRecord],
    nonmembers: &[FactRecord],
    tok: &Tokenizer,
    k_percent: f64,
) -> Result<f64> {
    auc_roc(
        &min_k_scores(ck, members, tok, k_percent)?,
        &min_k_scores(ck, nonmembers, tok, k_percent)?,
    )
}

pub fn privleak(
    f_unlearn: &Checkpoint,
    f_retrain: &Checkpoint,
    forget: &[FactRecord],
    nonmembers: &[FactRecord],
    tok: &Tokenizer,
    k_percent: f64,
) -> Result<f64> {
    let u = mia_auc(f_unlearn, forget, nonmembers, tok, k_percent)?;
    let r = mia_auc(f_retrain, forget, nonmembers, tok, k_percent)?;
    privleak_from_auc(u, r)
}

/// One table row: a (method, precision, adapter) cell and its scores.
/// `None` marks a value that is missing or undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub precision: String,
    pub adapter: String,
    pub vermem: Option<f64>,
    pub knowmem: Option<f64>,
    pub privleak: Option<f64>,
    pub utilitypres: Option<f64>,
    pub privleak_holdout: Option<f64>,
    /// Shared-grid crossing fraction against the target, per quantization label.
    pub crossing: Vec<(String, Option<f64>)>,
    /// Empty for a complete row, otherwise `missing` or a reason.
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Option<Protocol>,
    pub selection_rule: Option<String>,
    pub crossing_labels: Vec<String>,
    pub rows: Vec<ReportRow>,
}

pub const CSV_COLUMNS: [&str; 7] = [
    "Method",
    "Precision",
    "Adapter",
    "VerMem",
    "KnowMem",
    "PrivLeak",
    "UtilityPres",
];

fn cell(v: Option<f64>, missing: &str) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => missing.to_string(),
    }
}

impl MetricsReport {
    /// Table-ordered CSV followed by the secondary columns.
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push_str(",PrivLeakHoldout");
        for l in &self.crossing_labels {
            write!(out, ",Cross_{l}").unwrap();
        }
        out.push_str(",Status\n");
        for r in &self.rows {
            let gap = if r.status.is_empty() { "undefined" } else { "missing" };
            write!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.method,
                r.precision,
                r.adapter,
                cell(r.vermem, gap),
                cell(r.knowmem, gap),
                cell(r.privleak, gap),
                cell(r.utilitypres, gap),
                cell(r.privleak_holdout, gap),
            )
            .unwrap();
            for l in &self.crossing_labels {
                let v = r.crossing.iter().find(|(k, _)| k == l).and_then(|(_, v)| *v);
                let c = match v {
                    Some(x) => format!("{x:.4}"),
                    None => "NA".into(),
                };
                write!(out, ",{c}").unwrap();
            }
            writeln!(out, ",{}", r.status).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}
