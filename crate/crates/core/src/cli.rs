//! Operator commands.
//!
//! Exit codes: 0 ok, 1 config or usage error, 2 initialization failure,
//! 3 log parse error, 4 verification mismatch. Every error is printed as one
//! line on stderr.

use std::ffi::OsString;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::domain::{orient_score, Genotype, ObjectiveSpec};
use crate::engine::{build_fingerprinter, build_scorer, Engine, EngineError};
use crate::memory::{read_log, MemoryError, RecordKind, TrajectoryRecord};
use crate::metrics::{render_csv, timeline_from_records};
use crate::pareto::hypervolume;
use crate::proposers::parents_in_prompt;
use crate::similarity::{prompt_similarity, Fingerprinter, NgramFingerprinter};
use crate::synthesis::synthesize;
use crate::trainer::export_dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INIT: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

/// Tolerance when comparing recomputed values against stored ones.
pub const VERIFY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Parser)]
#[command(name = "coevo", version, about = "Co-evolutionary multi-objective search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the search loop and write all artifacts into the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` with a dotted key; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Synthesize a preference dataset from a trajectory log.
    SynthesizePairs {
        #[arg(long)]
        log: PathBuf,
        /// Recent prompts to draw from.
        #[arg(long)]
        window: usize,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 1)]
        pairs_per_prompt: usize,
        /// Dataset path; the report goes next to it as `<stem>.report.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute the metrics CSV from a trajectory log.
    Metrics {
        #[arg(long)]
        log: PathBuf,
        /// Output path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Hypervolume of a whitespace-separated points file (maximization).
    Hv {
        points: PathBuf,
        /// Reference point, comma separated; the origin when absent.
        #[arg(long = "ref", value_delimiter = ',', allow_negative_numbers = true)]
        reference: Option<Vec<f64>>,
    },
    /// Re-validate a trajectory log and recompute stored similarities.
    VerifyLog {
        #[arg(long)]
        log: PathBuf,
        /// Run config whose fingerprinter and scorer are used for
        /// recomputation; without it the n-gram fingerprinter is used and
        /// scores are not re-queried.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

fn usage(message: impl Into<String>) -> CliError {
    CliError::new(EXIT_USAGE, message)
}

fn log_error(e: MemoryError) -> CliError {
    match e {
        MemoryError::Io { .. } => usage(e.to_string()),
        _ => CliError::new(EXIT_PARSE, e.to_string()),
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

/// Parses arguments and runs one command; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message.replace('\n', " "));
            e.code
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, overrides, out } => cmd_run(&config, &overrides, &out),
        Command::SynthesizePairs { log, window, alpha, pairs_per_prompt, out } => {
            cmd_synthesize_pairs(&log, window, alpha, pairs_per_prompt, &out)
        }
        Command::Metrics { log, out } => cmd_metrics(&log, out.as_deref()),
        Command::Hv { points, reference } => {
            let v = cmd_hv(&points, reference.as_deref())?;
            println!("{v:?}");
            Ok(())
        }
        Command::VerifyLog { log, config } => {
            let summary = cmd_verify_log(&log, config.as_deref())?;
            println!("{summary}");
            Ok(())
        }
    }
}

pub fn cmd_run(config_path: &Path, overrides: &[String], out: &Path) -> Result<(), CliError> {
    let config = RunConfig::load(config_path, overrides).map_err(|e| usage(e.to_string()))?;
    let mut engine = Engine::new(config, Some(out)).map_err(|e| match e {
        EngineError::InitFailed(_) => CliError::new(EXIT_INIT, e.to_string()),
        _ => usage(e.to_string()),
    })?;
    engine.run_to_end().map_err(|e| usage(e.to_string()))?;
    engine.write_artifacts().map_err(|e| usage(e.to_string()))?;
    let summary = crate::metrics::summarize(engine.timeline());
    eprintln!(
        "finished {} generations, {} evaluations, archive hv {:.6}, {} trainer updates",
        engine.generation(),
        engine.evaluations_used(),
        summary.hv,
        engine.trainer().update_count()
    );
    Ok(())
}

pub fn cmd_synthesize_pairs(log: &Path, window: usize, alpha: f64, r: usize, out: &Path) -> Result<(), CliError> {
    let records = read_log(log).map_err(log_error)?;
    let result = synthesize(&records, window, alpha, r).map_err(|e| usage(e.to_string()))?;
    if result.triplets.is_empty() {
        write_file(out, "")?;
    } else {
        export_dataset(&result.triplets, out).map_err(|e| usage(e.to_string()))?;
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into());
    let report_path = out.with_file_name(format!("{stem}.report.json"));
    let mut report = serde_json::to_string_pretty(&result.report).expect("report serializes");
    report.push('\n');
    write_file(&report_path, &report)?;
    eprintln!("{} triplets from {} prompts", result.triplets.len(), result.report.window_prompts);
    Ok(())
}

pub fn cmd_metrics(log: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let records = read_log(log).map_err(log_error)?;
    let timeline = timeline_from_records(&records).map_err(|e| CliError::new(EXIT_PARSE, e.to_string()))?;
    let csv = render_csv(&timeline);
    match out {
        Some(p) => write_file(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

/// Reads one point per non-empty line.
pub fn read_points(text: &str) -> Result<Vec<Vec<f64>>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|f| f.parse::<f64>().map_err(|e| format!("line {}: `{f}`: {e}", i + 1)))
                .collect()
        })
        .collect()
}

pub fn cmd_hv(points_file: &Path, reference: Option<&[f64]>) -> Result<f64, CliError> {
    let text = std::fs::read_to_string(points_file).map_err(|e| usage(format!("{}: {e}", points_file.display())))?;
    let points = read_points(&text).map_err(usage)?;
    let k = match (reference, points.first()) {
        (Some(r), _) => r.len(),
        (None, Some(p)) => p.len(),
        (None, None) => return Ok(0.0),
    };
    let origin = vec![0.0; k];
    let reference = reference.unwrap_or(&origin);
    hypervolume(&points, reference).map(|r| r.value).map_err(|e| usage(e.to_string()))
}

/// Outcome of a clean verification.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifySummary {
    pub records: usize,
    pub candidates: usize,
    pub sims_checked: usize,
    pub scores_rechecked: usize,
}

impl std::fmt::Display for VerifySummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "ok: {} records, {} candidates, {} similarities and {} score vectors recomputed",
            self.records, self.candidates, self.sims_checked, self.scores_rechecked
        )
    }
}

fn mismatch(rec: &TrajectoryRecord, message: String) -> CliError {
    CliError::new(EXIT_MISMATCH, format!("record {}: {message}", rec.prompt_id))
}

pub fn cmd_verify_log(log: &Path, config: Option<&Path>) -> Result<VerifySummary, CliError> {
    let (fingerprinter, scorer): (Box<dyn Fingerprinter>, _) = match config {
        Some(p) => {
            let c = RunConfig::load(p, &[]).map_err(|e| usage(e.to_string()))?;
            let scorer = build_scorer(&c.scorer).map_err(|e| usage(e.to_string()))?;
            (build_fingerprinter(&c.fingerprinter), Some(scorer))
        }
        None => (Box::new(NgramFingerprinter), None),
    };
    let file = std::fs::File::open(log).map_err(|e| usage(format!("{}: {e}", log.display())))?;
    let mut records: Vec<TrajectoryRecord> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::new(EXIT_PARSE, format!("line {}: {e}", i + 1)))?;
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| CliError::new(EXIT_PARSE, format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }

    let mut summary = VerifySummary { records: records.len(), candidates: 0, sims_checked: 0, scores_rechecked: 0 };
    let mut objectives: Option<Vec<ObjectiveSpec>> = None;
    let mut seen_ids = std::collections::HashSet::new();
    let mut prev: Option<&TrajectoryRecord> = None;
    for (i, rec) in records.iter().enumerate() {
        rec.validate().map_err(|e| CliError::new(EXIT_MISMATCH, e.to_string()))?;
        match (i, rec.kind) {
            (0, RecordKind::Init) => objectives = Some(rec.objectives.clone()).filter(|o| !o.is_empty()),
            (0, _) => return Err(mismatch(rec, "first record is not an init record".into())),
            (_, RecordKind::Init) => return Err(mismatch(rec, "init record after the first line".into())),
            _ => {}
        }
        if let Some(p) = prev {
            if rec.prompt_id <= p.prompt_id || rec.timestamp <= p.timestamp || rec.generation < p.generation {
                return Err(mismatch(rec, "prompt id, timestamp or generation out of order".into()));
            }
        }
        prev = Some(rec);
        if rec.is_prompt() && parents_in_prompt(&rec.prompt_text) != rec.parent_genotypes {
            return Err(mismatch(rec, "parent genotypes differ from those embedded in the prompt".into()));
        }
        for c in &rec.candidates {
            summary.candidates += 1;
            if !seen_ids.insert(c.candidate_id) {
                return Err(mismatch(rec, format!("candidate id {} repeated", c.candidate_id)));
            }
            if !c.valid {
                continue;
            }
            if let Some(specs) = &objectives {
                if specs.len() != c.raw.len() {
                    return Err(mismatch(rec, format!("candidate {} has {} scores for {} objectives", c.candidate_id, c.raw.len(), specs.len())));
                }
                for ((spec, raw), oriented) in specs.iter().zip(&c.raw).zip(&c.oriented) {
                    let expect = orient_score(spec, *raw).map_err(|e| mismatch(rec, format!("candidate {}: {e}", c.candidate_id)))?;
                    if (expect - oriented).abs() > VERIFY_TOLERANCE {
                        return Err(mismatch(
                            rec,
                            format!("candidate {} objective {}: oriented {oriented} but raw {raw} orients to {expect}", c.candidate_id, spec.name),
                        ));
                    }
                }
            }
            if let Some(scorer) = &scorer {
                let g = Genotype::new(c.genotype.clone()).map_err(|e| mismatch(rec, e.to_string()))?;
                let fresh = scorer.score(&g).map_err(|e| mismatch(rec, format!("candidate {}: {e}", c.candidate_id)))?;
                if fresh.raw.len() != c.raw.len() || fresh.raw.iter().zip(&c.raw).any(|(a, b)| (a - b).abs() > VERIFY_TOLERANCE) {
                    return Err(mismatch(rec, format!("candidate {} raw scores differ from a fresh evaluation", c.candidate_id)));
                }
                summary.scores_rechecked += 1;
            }
            match (rec.is_prompt(), c.sim_to_prompt) {
                (true, Some(stored)) => {
                    let sim = prompt_similarity(fingerprinter.as_ref(), &c.genotype, &rec.parent_genotypes)
                        .map_err(|e| mismatch(rec, e.to_string()))?;
                    if (sim - stored).abs() > VERIFY_TOLERANCE {
                        return Err(mismatch(rec, format!("candidate {} similarity {stored} recomputes to {sim}", c.candidate_id)));
                    }
                    summary.sims_checked += 1;
                }
                (true, None) => return Err(mismatch(rec, format!("valid candidate {} lacks a similarity", c.candidate_id))),
                (false, Some(_)) => return Err(mismatch(rec, format!("init candidate {} carries a similarity", c.candidate_id))),
                (false, None) => {}
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hv_command_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pts.txt");
        std::fs::write(&p, "1 1\n").unwrap();
        assert_eq!(cmd_hv(&p, None).unwrap(), 1.0);
        std::fs::write(&p, "1 0.5\n0.5 1\n").unwrap();
        assert!((cmd_hv(&p, Some(&[0.0, 0.0])).unwrap() - 0.75).abs() < 1e-12);
        std::fs::write(&p, "1 x\n").unwrap();
        assert_eq!(cmd_hv(&p, None).unwrap_err().code, EXIT_USAGE);
    }

    #[test]
    fn parse_errors_are_usage_errors() {
        assert_eq!(main_with(["coevo", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with(["coevo", "metrics", "--log", "/nonexistent/log.jsonl"]), EXIT_USAGE);
    }
}
