//! Pipeline stages and the run directory they share.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RunSpec};
use crate::artifact::Artifact;
use crate::corpus::{build_tokenizer, encode_records, generate, CorpusSplit, Tokenizer};
use crate::error::{Error, Result};
use crate::lora::merge;
use crate::masking::{analyze_pair, MaskingReport};
use crate::metrics::{auc_roc, knowmem, min_k_scores, utilitypres, vermem, Protocol};
use crate::model::{init_model, load_checkpoint, Checkpoint};
use crate::numerics::derive_seed;
use crate::quantizer::{quantize_model_with_weights, QuantSpec};
use crate::train::train_lm;
use crate::unlearn::{unlearn_run, write_log_jsonl, Method, Mode, UnlearnConfig};

pub const TARGET: &str = "f_target";
pub const RETRAIN: &str = "f_retrain";
pub const FULL: &str = "full";

/// Paths inside one output directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("run_config.json")
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    /// `f_target`, `f_retrain` or an unlearning run id.
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        let dir = self.root.join("checkpoints");
        if name == TARGET || name == RETRAIN {
            dir.join(format!("{name}.json"))
        } else {
            dir.join("unlearn").join(format!("{name}.json"))
        }
    }

    pub fn adapters(&self, id: &str) -> PathBuf {
        self.root
            .join("checkpoints/unlearn")
            .join(format!("{id}.adapters.json"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn masking(&self, id: &str, ext: &str) -> PathBuf {
        self.root.join("masking").join(format!("{id}.{ext}"))
    }

    pub fn cell(&self, name: &str, precision: &str) -> PathBuf {
        self.root.join("eval").join(format!("{name}.{precision}.json"))
    }

    pub fn runs_manifest(&self) -> PathBuf {
        self.root.join("runs.json")
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }

    pub fn sweep(&self, ext: &str) -> PathBuf {
        self.root.join(format!("sweep.{ext}"))
    }

    /// The config the directory was produced with.
    pub fn load_config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config())
    }

    pub fn load_corpus(&self) -> Result<(CorpusSplit, Tokenizer)> {
        let path = self.corpus();
        if !path.exists() {
            return Err(Error::Input(format!(
                "{} not found; run `pretrain` first",
                path.display()
            )));
        }
        let split = CorpusSplit::read_jsonl(&path)?;
        let tok = build_tokenizer(&split);
        Ok((split, tok))
    }

    pub fn load_required(&self, name: &str) -> Result<Checkpoint> {
        let path = self.checkpoint(name);
        if !path.exists() {
            let hint = if name == RETRAIN { "retrain" } else { "pretrain" };
            return Err(Error::Input(format!(
                "{} not found; run `{hint}` first",
                path.display()
            )));
        }
        load_checkpoint(&path)
    }
}

/// `<stem>.<label>.json` next to `path`.
pub fn quantized_path(path: &Path, label: &str) -> PathBuf {
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".json").unwrap_or(n))
        .unwrap_or("checkpoint");
    path.with_file_name(format!("{stem}.{label}.json"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Order-preserving map over `items` on up to `jobs` threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every item mapped"))
        .collect()
}

/// Generate the corpus and record the resolved config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(CorpusSplit, Tokenizer)> {
    let dir = RunDir::new(&cfg.output_dir);
    let split = generate(&cfg.corpus_request())?;
    let tok = build_tokenizer(&split);
    write_text(&dir.config(), &cfg.to_json())?;
    split.write_jsonl(&dir.corpus())?;
    write_json(&dir.vocab(), &tok.tokens())?;
    Ok((split, tok))
}

/// Scores checked against the gate after training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateScores {
    pub vermem: f64,
    pub utilitypres: f64,
}

fn gate_scores(ck: &Checkpoint, split: &CorpusSplit, tok: &Tokenizer, p: &Protocol) -> Result<GateScores> {
    Ok(GateScores {
        vermem: vermem(ck, &split.forget, tok, p.prefix)?.score,
        utilitypres: utilitypres(ck, &split.retain, tok)?,
    })
}

/// Train `f_target` on the duplicated forget set plus the retain set.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<GateScores> {
    let dir = RunDir::new(&cfg.output_dir);
    let (split, tok) = prepare(cfg)?;
    let init = init_model(&cfg.model_config(tok.vocab_size()))?;
    let forget = encode_records(&split.forget, &tok)?;
    let mut seqs = Vec::new();
    for _ in 0..cfg.pretrain.forget_duplication {
        seqs.extend(forget.iter().cloned());
    }
    seqs.extend(encode_records(&split.retain, &tok)?);
    let (ck, log) = train_lm(&init, &seqs, &cfg.pretrain.schedule(), derive_seed(cfg.seed, "pretrain"))?;
    let ck = Checkpoint {
        provenance: TARGET.into(),
        ..ck
    };
    ck.save(&dir.checkpoint(TARGET))?;
    write_log_jsonl(&log, &dir.log("pretrain"))?;
    let scores = gate_scores(&ck, &split, &tok, &cfg.protocol)?;
    log::info!(
        "pretrain: VerMem {:.1}, UtilityPres {:.1}",
        scores.vermem,
        scores.utilitypres
    );
    if scores.vermem < cfg.gate.min_vermem || scores.utilitypres < cfg.gate.min_utility {
        return Err(Error::Gate(format!(
            "f_target reached VerMem {:.1} (need {}) and UtilityPres {:.1} (need {}); \
             raise pretrain.steps",
            scores.vermem, cfg.gate.min_vermem, scores.utilitypres, cfg.gate.min_utility
        )));
    }
    Ok(scores)
}

/// Train `f_retrain` from a fresh init on the retain set only.
pub fn cmd_retrain(cfg: &ExperimentConfig) -> Result<GateScores> {
    let dir = RunDir::new(&cfg.output_dir);
    let (split, tok) = prepare(cfg)?;
    let mut mc = cfg.model_config(tok.vocab_size());
    mc.seed = derive_seed(cfg.seed, "model:retrain");
    let init = init_model(&mc)?;
    let seqs = encode_records(&split.retain, &tok)?;
    let (ck, log) = train_lm(&init, &seqs, &cfg.retrain_schedule(), derive_seed(cfg.seed, "retrain"))?;
    let ck = Checkpoint {
        provenance: RETRAIN.into(),
        ..ck
    };
    ck.save(&dir.checkpoint(RETRAIN))?;
    write_log_jsonl(&log, &dir.log("retrain"))?;
    let scores = gate_scores(&ck, &split, &tok, &cfg.protocol)?;
    log::info!(
        "retrain: VerMem {:.1}, UtilityPres {:.1}",
        scores.vermem,
        scores.utilitypres
    );
    if scores.utilitypres < cfg.gate.min_utility {
        return Err(Error::Gate(format!(
            "f_retrain reached UtilityPres {:.1} (need {}); raise the retrain steps",
            scores.utilitypres, cfg.gate.min_utility
        )));
    }
    Ok(scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
}

/// Outcome of one unlearning run as recorded in `runs.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub config: UnlearnConfig,
    pub status: RunStatus,
    pub steps: usize,
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunsManifest {
    pub runs: Vec<RunRecord>,
}

impl RunsManifest {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            read_json(path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn get(&self, id: &str) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.id == id)
    }

    /// Replace records with the same id, keeping `order` for the result.
    pub fn upsert(&mut self, records: Vec<RunRecord>, order: &[RunSpec]) {
        for r in records {
            self.runs.retain(|x| x.id != r.id);
            self.runs.push(r);
        }
        let pos = |id: &str| order.iter().position(|s| s.id == id).unwrap_or(usize::MAX);
        self.runs.sort_by_key(|r| pos(&r.id));
    }

    pub fn diverged(&self) -> Vec<&RunRecord> {
        self.runs
            .iter()
            .filter(|r| r.status == RunStatus::Diverged)
            .collect()
    }
}

/// Run one grid point against `target` and write its artifacts. A diverged
/// run leaves no checkpoint behind.
pub fn execute_run(
    dir: &RunDir,
    target: &Checkpoint,
    split: &CorpusSplit,
    tok: &Tokenizer,
    spec: &RunSpec,
) -> Result<RunRecord> {
    log::info!("unlearn {}", spec.id);
    match unlearn_run(target, split, tok, &spec.config) {
        Ok(out) => {
            out.checkpoint.save(&dir.checkpoint(&spec.id))?;
            if let Some(set) = out.adapters {
                let base = target.clone().with_provenance_suffix(&format!(
                    ":{}-lora",
                    spec.config.method
                ));
                Artifact {
                    checkpoint: base,
                    adapters: Some(set),
                    quantized: None,
                }
                .save(&dir.adapters(&spec.id))?;
            }
            write_log_jsonl(&out.log, &dir.log(&format!("unlearn/{}", spec.id)))?;
            Ok(RunRecord {
                id: spec.id.clone(),
                config: spec.config.clone(),
                status: RunStatus::Ok,
                steps: out.log.len(),
                final_loss: out.log.last().map(|r| r.total),
                message: None,
            })
        }
        Err(Error::Divergence {
            step,
            message,
            last_finite,
        }) => {
            log::warn!("{} diverged at step {step}: {message}", spec.id);
            for p in [dir.checkpoint(&spec.id), dir.adapters(&spec.id)] {
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
            Ok(RunRecord {
                id: spec.id.clone(),
                config: spec.config.clone(),
                status: RunStatus::Diverged,
                steps: step,
                final_loss: last_finite.last().copied(),
                message: Some(format!("{message}; last finite losses {last_finite:?}")),
            })
        }
        Err(e) => Err(e),
    }
}

/// Unlearning runs of the grid matching `method` and `mode`.
pub fn cmd_unlearn(cfg: &ExperimentConfig, method: Method, mode: Mode, jobs: usize) -> Result<Vec<RunRecord>> {
    let all = cfg.runs()?;
    let chosen: Vec<RunSpec> = all
        .iter()
        .filter(|r| r.config.method == method && r.config.mode == mode)
        .cloned()
        .collect();
    if chosen.is_empty() {
        return Err(Error::Config(format!(
            "the grid has no {method} run in {} mode",
            mode.as_str()
        )));
    }
    run_unlearning(cfg, &chosen, &all, jobs)
}

fn run_unlearning(
    cfg: &ExperimentConfig,
    specs: &[RunSpec],
    order: &[RunSpec],
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    let dir = RunDir::new(&cfg.output_dir);
    let (split, tok) = dir.load_corpus()?;
    let target = dir.load_required(TARGET)?;
    let records = parallel_map(specs, jobs, |s| execute_run(&dir, &target, &split, &tok, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = RunsManifest::load_or_default(&dir.runs_manifest())?;
    manifest.upsert(records.clone(), order);
    write_json(&dir.runs_manifest(), &manifest)?;
    Ok(records)
}

/// Merge the adapters stored in `path` into its base weights.
pub fn cmd_merge(path: &Path, output: &Path) -> Result<Checkpoint> {
    let art = Artifact::load(path)?;
    let set = art.adapters.ok_or_else(|| {
        Error::Input(format!("{} holds no adapters to merge", path.display()))
    })?;
    let merged = merge(&art.checkpoint, &set)?;
    merged.save(output)?;
    Ok(merged)
}

/// Default output of [`cmd_merge`]: `<id>.adapters.json` becomes `<id>.merged.json`.
pub fn merged_path(adapters: &Path) -> PathBuf {
    let name = adapters.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let stem = name
        .strip_suffix(".adapters.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(name);
    adapters.with_file_name(format!("{stem}.merged.json"))
}

/// Fake-quantize a merged or full checkpoint into sibling files, one per spec.
pub fn cmd_quantize(path: &Path, specs: &[QuantSpec]) -> Result<Vec<PathBuf>> {
    let art = Artifact::load(path)?;
    if art.adapters.is_some() {
        return Err(Error::Contract(format!(
            "{} holds unmerged lora adapters; merge them before quantizing",
            path.display()
        )));
    }
    if let Some(q) = &art.quantized {
        return Err(Error::Contract(format!(
            "{} is already quantized ({})",
            path.display(),
            q.spec.label()
        )));
    }
    let mut out = Vec::new();
    for spec in specs {
        let (ck, qw) = quantize_model_with_weights(&art.checkpoint, spec)?;
        let p = quantized_path(path, &spec.label());
        Artifact {
            checkpoint: ck,
            adapters: None,
            quantized: Some(qw),
        }
        .save(&p)?;
        out.push(p);
    }
    Ok(out)
}

/// Masking statistics of `updated` against `base`, written as CSV and JSON.
pub fn cmd_analyze(
    base: &Path,
    updated: &Path,
    specs: &[QuantSpec],
    csv: &Path,
    json: &Path,
) -> Result<MaskingReport> {
    let rep = analyze_pair(&load_checkpoint(base)?, &load_checkpoint(updated)?, specs)?;
    write_text(csv, &rep.to_csv())?;
    write_text(json, &rep.to_json())?;
    Ok(rep)
}

/// Metrics of one checkpoint at one precision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub checkpoint: String,
    pub precision: String,
    pub provenance: String,
    pub vermem: f64,
    pub vermem_evaluated: usize,
    pub vermem_skipped: usize,
    pub knowmem: f64,
    pub utilitypres: f64,
    /// Min-K% AUC, forget set as members against the retain set.
    pub auc_forget_retain: f64,
    /// Min-K% AUC, forget set as members against the holdout set.
    pub auc_forget_holdout: f64,
}

pub fn cmd_eval(
    name: &str,
    precision: &str,
    ck: &Checkpoint,
    split: &CorpusSplit,
    tok: &Tokenizer,
    protocol: &Protocol,
) -> Result<EvalCell> {
    protocol.validate()?;
    let vm = vermem(ck, &split.forget, tok, protocol.prefix)?;
    let k = protocol.k_percent;
    let forget = min_k_scores(ck, &split.forget, tok, k)?;
    Ok(EvalCell {
        checkpoint: name.into(),
        precision: precision.into(),
        provenance: ck.provenance.clone(),
        vermem: vm.score,
        vermem_evaluated: vm.evaluated,
        vermem_skipped: vm.skipped,
        knowmem: knowmem(ck, &split.forget, tok)?,
        utilitypres: utilitypres(ck, &split.retain, tok)?,
        auc_forget_retain: auc_roc(&forget, &min_k_scores(ck, &split.retain, tok, k)?)?,
        auc_forget_holdout: auc_roc(&forget, &min_k_scores(ck, &split.holdout, tok, k)?)?,
    })
}

/// Checkpoint names the pipeline evaluates, in report order.
pub fn checkpoint_names(manifest: &RunsManifest) -> Vec<String> {
    let mut names = vec![TARGET.to_string(), RETRAIN.to_string()];
    names.extend(
        manifest
            .runs
            .iter()
            .filter(|r| r.status == RunStatus::Ok)
            .map(|r| r.id.clone()),
    );
    names
}

/// Quantize, analyze and evaluate every trained checkpoint.
pub fn evaluate_all(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let dir = RunDir::new(&cfg.output_dir);
    let (split, tok) = dir.load_corpus()?;
    let manifest = RunsManifest::load_or_default(&dir.runs_manifest())?;
    let names = checkpoint_names(&manifest);

    parallel_map(&names, jobs, |n| cmd_quantize(&dir.checkpoint(n), &cfg.quant))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    parallel_map(&names[2..], jobs, |id| {
        cmd_analyze(
            &dir.checkpoint(TARGET),
            &dir.checkpoint(id),
            &cfg.quant,
            &dir.masking(id, "csv"),
            &dir.masking(id, "json"),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut cells: Vec<(String, String, PathBuf)> = Vec::new();
    for n in &names {
        let base = dir.checkpoint(n);
        cells.push((n.clone(), FULL.into(), base.clone()));
        for s in &cfg.quant {
            cells.push((n.clone(), s.label(), quantized_path(&base, &s.label())));
        }
    }
    parallel_map(&cells, jobs, |(name, prec, path)| {
        log::info!("eval {name} at {prec}");
        let ck = load_checkpoint(path)?;
        let cell = cmd_eval(name, prec, &ck, &split, &tok, &cfg.protocol)?;
        write_json(&dir.cell(name, prec), &cell)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(())
}

/// Everything from corpus generation to the report. Returns the run
/// manifest so callers can tell whether any run diverged.
pub fn run_pipeline(cfg: &ExperimentConfig, jobs: usize, with_sweep: bool) -> Result<RunsManifest> {
    let dir = RunDir::new(&cfg.output_dir);
    cmd_pretrain(cfg)?;
    cmd_retrain(cfg)?;
    let runs = cfg.runs()?;
    if dir.runs_manifest().exists() {
        fs::remove_file(dir.runs_manifest()).map_err(|e| Error::io(dir.runs_manifest(), e))?;
    }
    run_unlearning(cfg, &runs, &runs, jobs)?;
    evaluate_all(cfg, jobs)?;
    super::report::cmd_report(&dir)?;
    if with_sweep {
        super::report::cmd_sweep_summary(&dir)?;
    }
    RunsManifest::load_or_default(&dir.runs_manifest())
}
