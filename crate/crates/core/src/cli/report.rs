//! Report tables assembled from evaluated cells, and sweep selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, RunSpec};
use super::pipeline::{
    read_json, write_json, write_text, EvalCell, RunDir, RunStatus, RunsManifest, FULL, RETRAIN, TARGET,
};
use crate::error::Result;
use crate::masking::MaskingReport;
use crate::metrics::{privleak_from_auc, MetricsReport, ReportRow};
use crate::quantizer::QuantSpec;
use crate::unlearn::{Method, Mode};

/// How far VerMem at the lowest bit width may exceed full precision before
/// a configuration counts as reverted.
pub const SELECTION_SLACK: f64 = 5.0;

pub fn selection_rule(low: &str) -> String {
    format!(
        "per (method, mode): maximize UtilityPres({low}) subject to VerMem({low}) <= VerMem(full) + {SELECTION_SLACK}; \
         ties go to the earlier config; if no config is feasible the constraint is dropped. \
         This scalar is a local convention."
    )
}

/// Scores a sweep candidate is ranked by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub vermem_full: f64,
    pub vermem_low: f64,
    pub utility_low: f64,
}

impl Candidate {
    pub fn feasible(&self) -> bool {
        self.vermem_low <= self.vermem_full + SELECTION_SLACK
    }
}

/// Index of the winning candidate and whether it met the constraint.
/// `None` entries (diverged or unevaluated runs) never win.
pub fn select(cands: &[Option<Candidate>]) -> Option<(usize, bool)> {
    let best = |feasible_only: bool| {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in cands.iter().enumerate() {
            let Some(c) = c else { continue };
            if feasible_only && !c.feasible() {
                continue;
            }
            if best.is_none_or(|(_, u)| c.utility_low > u) {
                best = Some((i, c.utility_low));
            }
        }
        best.map(|(i, _)| i)
    };
    best(true)
        .map(|i| (i, true))
        .or_else(|| best(false).map(|i| (i, false)))
}

/// Label of the lowest-bit spec; the first one listed wins ties.
pub fn low_bit_label(specs: &[QuantSpec]) -> String {
    specs
        .iter()
        .min_by_key(|s| s.bits)
        .map(QuantSpec::label)
        .unwrap_or_else(|| FULL.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub id: String,
    pub method: Method,
    pub mode: Mode,
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub rank: Option<usize>,
    pub alpha: Option<f64>,
    pub status: String,
    pub scores: Option<Candidate>,
    pub feasible: bool,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub selection_rule: String,
    pub low_bit: String,
    pub rows: Vec<SweepRow>,
}

impl SweepSummary {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\n", self.selection_rule);
        out.push_str("id,method,mode,lr,epochs,lambda,rank,alpha,status,vermem_full,");
        writeln!(out, "vermem_{0},utility_{0},feasible,selected", self.low_bit).unwrap();
        let opt = |v: Option<String>| v.unwrap_or_else(|| "NA".into());
        for r in &self.rows {
            let s = r.scores;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.id,
                r.method,
                r.mode.as_str(),
                r.lr,
                r.epochs,
                r.lambda,
                opt(r.rank.map(|x| x.to_string())),
                opt(r.alpha.map(|x| x.to_string())),
                r.status,
                opt(s.map(|c| format!("{:.2}", c.vermem_full))),
                opt(s.map(|c| format!("{:.2}", c.vermem_low))),
                opt(s.map(|c| format!("{:.2}", c.utility_low))),
                r.feasible,
                r.selected
            )
            .unwrap();
        }
        out
    }
}

/// Cells, masking reports and run statuses of a run directory.
struct Artifacts {
    cfg: ExperimentConfig,
    runs: Vec<RunSpec>,
    manifest: RunsManifest,
    cells: BTreeMap<(String, String), EvalCell>,
    masking: BTreeMap<String, MaskingReport>,
}

impl Artifacts {
    fn load(dir: &RunDir) -> Result<Self> {
        let cfg = dir.load_config()?;
        let runs = cfg.runs()?;
        let manifest = RunsManifest::load_or_default(&dir.runs_manifest())?;
        let mut names = vec![TARGET.to_string(), RETRAIN.to_string()];
        names.extend(runs.iter().map(|r| r.id.clone()));
        let mut precisions = vec![FULL.to_string()];
        precisions.extend(cfg.quant.iter().map(QuantSpec::label));
        let mut cells = BTreeMap::new();
        let mut masking = BTreeMap::new();
        for n in &names {
            for p in &precisions {
                let path = dir.cell(n, p);
                if path.exists() {
                    cells.insert((n.clone(), p.clone()), read_json(&path)?);
                }
            }
            let m = dir.masking(n, "json");
            if m.exists() {
                masking.insert(n.clone(), read_json(&m)?);
            }
        }
        Ok(Self {
            cfg,
            runs,
            manifest,
            cells,
            masking,
        })
    }

    fn cell(&self, name: &str, precision: &str) -> Option<&EvalCell> {
        self.cells.get(&(name.to_string(), precision.to_string()))
    }

    fn status(&self, id: &str) -> Option<RunStatus> {
        self.manifest.get(id).map(|r| r.status)
    }

    fn candidate(&self, id: &str, low: &str) -> Option<Candidate> {
        if self.status(id) != Some(RunStatus::Ok) {
            return None;
        }
        let full = self.cell(id, FULL)?;
        let q = self.cell(id, low)?;
        Some(Candidate {
            vermem_full: full.vermem,
            vermem_low: q.vermem,
            utility_low: q.utilitypres,
        })
    }

    /// Runs grouped by (method, mode) in first-appearance order.
    fn groups(&self) -> Vec<((Method, Mode), Vec<&RunSpec>)> {
        let mut out: Vec<((Method, Mode), Vec<&RunSpec>)> = Vec::new();
        for r in &self.runs {
            let key = (r.config.method, r.config.mode);
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(r),
                None => out.push((key, vec![r])),
            }
        }
        out
    }

    fn sweep(&self) -> SweepSummary {
        let low = low_bit_label(&self.cfg.quant);
        let mut rows = Vec::new();
        for (_, specs) in self.groups() {
            let cands: Vec<Option<Candidate>> = specs.iter().map(|s| self.candidate(&s.id, &low)).collect();
            let winner = select(&cands);
            for (i, (s, c)) in specs.iter().zip(&cands).enumerate() {
                let status = match self.status(&s.id) {
                    Some(RunStatus::Ok) if c.is_some() => "ok",
                    Some(RunStatus::Ok) => "missing",
                    Some(RunStatus::Diverged) => "diverged",
                    None => "missing",
                };
                rows.push(SweepRow {
                    id: s.id.clone(),
                    method: s.config.method,
                    mode: s.config.mode,
                    lr: s.config.lr,
                    epochs: s.config.epochs,
                    lambda: s.config.lambda,
                    rank: s.config.lora.as_ref().map(|l| l.rank),
                    alpha: s.config.lora.as_ref().map(|l| l.alpha),
                    status: status.into(),
                    scores: *c,
                    feasible: c.is_some_and(|c| c.feasible()),
                    selected: winner.is_some_and(|(w, _)| w == i),
                });
            }
        }
        SweepSummary {
            selection_rule: selection_rule(&low),
            low_bit: low,
            rows,
        }
    }

    fn report(&self) -> MetricsReport {
        let labels: Vec<String> = self.cfg.quant.iter().map(QuantSpec::label).collect();
        let mut precisions = vec![FULL.to_string()];
        precisions.extend(labels.iter().cloned());
        let retrain = self.cell(RETRAIN, FULL);
        let sweep = self.sweep();

        // (method label, adapter, checkpoint name, status override)
        let mut entries: Vec<(String, String, String, Option<String>)> = vec![
            ("Target".into(), "none".into(), TARGET.into(), None),
            ("Retrain".into(), "none".into(), RETRAIN.into(), None),
        ];
        for ((method, mode), specs) in self.groups() {
            let adapter = match mode {
                Mode::FullFt => "none",
                Mode::Lora => "lora",
            };
            let chosen = sweep
                .rows
                .iter()
                .find(|r| r.selected && r.method == method && r.mode == mode);
            let (id, status) = match chosen {
                Some(r) => (r.id.clone(), None),
                None => {
                    let any_diverged = specs
                        .iter()
                        .any(|s| self.status(&s.id) == Some(RunStatus::Diverged));
                    let why = if any_diverged { "diverged" } else { "missing" };
                    (specs[0].id.clone(), Some(why.to_string()))
                }
            };
            entries.push((method.to_string(), adapter.into(), id, status));
        }

        let mut rows = Vec::new();
        for (method, adapter, name, forced) in &entries {
            let crossing: Vec<(String, Option<f64>)> = labels
                .iter()
                .map(|l| {
                    let v = self
                        .masking
                        .get(name)
                        .and_then(|m| m.aggregate(l))
                        .map(|a| a.crossing_fraction);
                    (l.clone(), v)
                })
                .collect();
            for p in &precisions {
                let cell = if forced.is_some() { None } else { self.cell(name, p) };
                let row = match cell {
                    None => ReportRow {
                        method: method.clone(),
                        precision: p.clone(),
                        adapter: adapter.clone(),
                        vermem: None,
                        knowmem: None,
                        privleak: None,
                        utilitypres: None,
                        privleak_holdout: None,
                        crossing: crossing.clone(),
                        status: forced.clone().unwrap_or_else(|| "missing".into()),
                    },
                    Some(c) => {
                        let leak = |u: f64, r: Option<f64>| r.and_then(|r| privleak_from_auc(u, r).ok());
                        ReportRow {
                            method: method.clone(),
                            precision: p.clone(),
                            adapter: adapter.clone(),
                            vermem: Some(c.vermem),
                            knowmem: Some(c.knowmem),
                            privleak: leak(c.auc_forget_retain, retrain.map(|r| r.auc_forget_retain)),
                            utilitypres: Some(c.utilitypres),
                            privleak_holdout: leak(
                                c.auc_forget_holdout,
                                retrain.map(|r| r.auc_forget_holdout),
                            ),
                            crossing: crossing.clone(),
                            status: if retrain.is_none() {
                                "retrain missing".into()
                            } else {
                                String::new()
                            },
                        }
                    }
                };
                rows.push(row);
            }
        }
        MetricsReport {
            protocol: Some(self.cfg.protocol),
            selection_rule: Some(sweep.selection_rule),
            crossing_labels: labels,
            rows,
        }
    }
}

/// Write `report.csv` and `report.json` from whatever cells exist.
pub fn cmd_report(dir: &RunDir) -> Result<MetricsReport> {
    let rep = Artifacts::load(dir)?.report();
    write_text(&dir.report("csv"), &rep.to_csv())?;
    write_text(&dir.report("json"), &rep.to_json())?;
    Ok(rep)
}

/// Write `sweep.csv` and `sweep.json` ranking every configuration.
pub fn cmd_sweep_summary(dir: &RunDir) -> Result<SweepSummary> {
    let s = Artifacts::load(dir)?.sweep();
    write_text(&dir.sweep("csv"), &s.to_csv())?;
    write_json(&dir.sweep("json"), &s)?;
    Ok(s)
}
