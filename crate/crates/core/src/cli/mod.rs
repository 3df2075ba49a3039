//! Command-line front end.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 training
//! divergence, 4 acceptance-gate failure.

pub mod config;
pub mod pipeline;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::corpus::{build_tokenizer, CorpusSplit};
use crate::error::{Error, Result};
use crate::metrics::{privleak_from_auc, Protocol};
use crate::model::load_checkpoint;
use crate::quantizer::{Grouping, QuantSpec};
use crate::unlearn::{Method, Mode};
use config::{resolve, ExperimentConfig};
use pipeline::{RunDir, RunsManifest, FULL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_GATE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "quant-unlearn", version, about = "Unlearning vs. post-training quantization at toy scale")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides the config's.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides the config's.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for unlearning and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the target model on forget and retain sets, then check the gate.
    Pretrain,
    /// Train the retain-only reference model.
    Retrain,
    /// Run the grid entries for one method and mode.
    Unlearn {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
    },
    /// Merge stored lora adapters into their base weights.
    Merge {
        #[arg(long)]
        adapters: PathBuf,
        /// Defaults to `<id>.merged.json` next to the input.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fake-quantize a checkpoint into sibling files.
    Quantize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Masking statistics of an updated checkpoint against its base.
    Analyze {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        updated: PathBuf,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Evaluate one checkpoint and print its metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `corpus.jsonl` in the output directory.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Retain-only model to compute PrivLeak against.
        #[arg(long)]
        retrain: Option<PathBuf>,
    },
    /// Assemble report tables from an output directory.
    Report,
    /// Run the whole pipeline and rank every grid configuration.
    Sweep,
    /// Run the whole pipeline.
    Run,
}

/// Explicit quantization spec; without `--bits` the config's list is used.
#[derive(Debug, clap::Args)]
pub struct SpecArgs {
    #[arg(long)]
    pub bits: Option<u32>,
    /// Group length; per-row scales when absent.
    #[arg(long, requires = "bits")]
    pub group: Option<usize>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Spec(_) => EXIT_CONFIG,
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::Gate(_) => EXIT_GATE,
        _ => EXIT_FAILURE,
    }
}

impl Cli {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let path = self
            .config
            .as_deref()
            .ok_or_else(|| Error::Config("this command needs --config".into()))?;
        resolve(ExperimentConfig::load(path)?, self.out.as_deref(), self.seed)
    }

    fn optional_experiment(&self) -> Result<Option<ExperimentConfig>> {
        match &self.config {
            Some(_) => self.experiment().map(Some),
            None => Ok(None),
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        if let Some(o) = &self.out {
            return Ok(o.clone());
        }
        match self.optional_experiment()? {
            Some(cfg) => Ok(cfg.output_dir),
            None => Err(Error::Config("give --out or --config".into())),
        }
    }

    fn specs(&self, args: &SpecArgs) -> Result<Vec<QuantSpec>> {
        if let Some(bits) = args.bits {
            let grouping = args.group.map_or(Grouping::PerRow, Grouping::Group);
            let s = QuantSpec::new(bits, grouping);
            s.validate()?;
            return Ok(vec![s]);
        }
        Ok(match self.optional_experiment()? {
            Some(cfg) => cfg.quant,
            None => vec![QuantSpec::int8(), QuantSpec::int4()],
        })
    }

    fn protocol(&self) -> Result<Protocol> {
        Ok(self.optional_experiment()?.map(|c| c.protocol).unwrap_or_default())
    }
}

fn diverged_error(m: &RunsManifest) -> Result<()> {
    let bad = m.diverged();
    if bad.is_empty() {
        return Ok(());
    }
    let first = bad[0];
    Err(Error::Divergence {
        step: first.steps,
        message: format!(
            "{} of {} runs diverged ({}), recorded in runs.json",
            bad.len(),
            m.runs.len(),
            bad.iter().map(|r| r.id.as_str()).collect::<Vec<_>>().join(", ")
        ),
        last_finite: first.final_loss.into_iter().collect(),
    })
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

pub fn execute(cli: &Cli) -> Result<()> {
    let jobs = cli.jobs.max(1);
    match &cli.command {
        Command::Pretrain => print_json(&pipeline::cmd_pretrain(&cli.experiment()?)?),
        Command::Retrain => print_json(&pipeline::cmd_retrain(&cli.experiment()?)?),
        Command::Unlearn { method, mode } => {
            let recs = pipeline::cmd_unlearn(&cli.experiment()?, *method, *mode, jobs)?;
            print_json(&recs);
            diverged_error(&RunsManifest { runs: recs })?;
        }
        Command::Merge { adapters, output } => {
            let out = output.clone().unwrap_or_else(|| pipeline::merged_path(adapters));
            pipeline::cmd_merge(adapters, &out)?;
            println!("{}", out.display());
        }
        Command::Quantize { checkpoint, spec } => {
            for p in pipeline::cmd_quantize(checkpoint, &cli.specs(spec)?)? {
                println!("{}", p.display());
            }
        }
        Command::Analyze { base, updated, spec } => {
            let specs = cli.specs(spec)?;
            let dir = RunDir::new(cli.out_dir()?);
            let stem = file_stem(updated);
            let rep = pipeline::cmd_analyze(
                base,
                updated,
                &specs,
                &dir.masking(&stem, "csv"),
                &dir.masking(&stem, "json"),
            )?;
            print!("{}", rep.to_csv());
        }
        Command::Eval {
            checkpoint,
            corpus,
            retrain,
        } => {
            let corpus = match corpus {
                Some(c) => c.clone(),
                None => RunDir::new(cli.out_dir()?).corpus(),
            };
            let split = CorpusSplit::read_jsonl(&corpus)?;
            let tok = build_tokenizer(&split);
            let protocol = cli.protocol()?;
            let ck = load_checkpoint(checkpoint)?;
            let cell = pipeline::cmd_eval(&file_stem(checkpoint), FULL, &ck, &split, &tok, &protocol)?;
            let mut value = serde_json::to_value(&cell).expect("cell serializes");
            if let Some(r) = retrain {
                let rc = pipeline::cmd_eval(pipeline::RETRAIN, FULL, &load_checkpoint(r)?, &split, &tok, &protocol)?;
                let leak = |u, r| privleak_from_auc(u, r).ok();
                value["privleak"] = serde_json::json!(leak(cell.auc_forget_retain, rc.auc_forget_retain));
                value["privleak_holdout"] =
                    serde_json::json!(leak(cell.auc_forget_holdout, rc.auc_forget_holdout));
            }
            print_json(&value);
        }
        Command::Report => {
            let rep = report::cmd_report(&RunDir::new(cli.out_dir()?))?;
            print!("{}", rep.to_csv());
        }
        Command::Sweep => {
            let cfg = cli.experiment()?;
            let manifest = pipeline::run_pipeline(&cfg, jobs, true)?;
            print!("{}", std::fs::read_to_string(RunDir::new(&cfg.output_dir).sweep("csv")).unwrap_or_default());
            diverged_error(&manifest)?;
        }
        Command::Run => {
            let cfg = cli.experiment()?;
            let manifest = pipeline::run_pipeline(&cfg, jobs, false)?;
            print!("{}", std::fs::read_to_string(RunDir::new(&cfg.output_dir).report("csv")).unwrap_or_default());
            diverged_error(&manifest)?;
        }
    }
    Ok(())
}


fn file_stem(p: &Path) -> String {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    name.strip_suffix(".json").unwrap_or(name).to_string()
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
