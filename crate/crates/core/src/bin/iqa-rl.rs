//! Command-line front end for the training-pipeline engine.
//!
//! Subcommands mirror the library's pipeline stages: `reward` scores rollout
//! files and evaluates the step objective, `curate` runs the dataset
//! filters, `hints` computes numeric image descriptors from PPM files,
//! `resample` plans tempered epochs, `eval` computes correlation and
//! diversity metrics, and `train-sim` runs one arm of the toy collapse
//! experiment.
//!
//! Exit codes: 0 on success, 1 for validation failures (malformed records,
//! bad configuration, degenerate inputs), 2 for I/O failures.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use iqa_rl::curation::{
    hacf_apply, vrf_filter_record, CurationError, CurationSummary, FilterOutcome, RaterRequest,
    RawPairRecord,
};
use iqa_rl::hints::{compute_hints, HintVector, HintsError};
use iqa_rl::metrics::{eval_report, MetricsError};
use iqa_rl::policy::PolicyError;
use iqa_rl::resample::{plan_epoch, uniform_edges, DatasetRecord, ResampleError};
use iqa_rl::reward::RewardError;
use iqa_rl::rollout::{read_rollouts_path, step_report, write_rollouts, RolloutError};
use iqa_rl::sim::{run_experiment, RunConfig, SimError};
use iqa_rl::EngineConfig;

#[derive(Parser)]
#[command(
    name = "iqa-rl",
    version,
    about = "Reward shaping, policy-step evaluation, dataset curation, and diagnostics for image-quality-assessment training loops"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a rollout file and evaluate the training-step objective.
    Reward {
        /// Rollout records, one JSON object per line.
        rollouts: PathBuf,
        /// Engine configuration file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write reward-annotated rollouts here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the step report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Dataset-curation filters.
    Curate {
        #[command(subcommand)]
        filter: CurateCommand,
    },
    /// Compute numeric image descriptors for a manifest of PPM images.
    Hints {
        /// Manifest records `{id, mos, path}`, one JSON object per line.
        manifest: PathBuf,
        /// Write descriptor rows here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan one re-sampled epoch over score bins.
    Resample {
        /// Manifest records `{id, mos, path}`, one JSON object per line.
        manifest: PathBuf,
        /// Tempering stage to draw from.
        #[arg(long)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        /// Number of draws (defaults to the manifest size).
        #[arg(long)]
        epoch_size: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Engine configuration file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the epoch plan here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write bin edges, counts, and weights here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Correlation and diversity metrics for predictions against a manifest.
    Eval {
        /// CSV with header `id,score`.
        predictions: PathBuf,
        /// Manifest records `{id, mos, path}`, one JSON object per line.
        manifest: PathBuf,
    },
    /// Run one arm of the toy score-diversity collapse experiment.
    TrainSim {
        /// Whether the KL-coverage regularizer is active.
        #[arg(long, value_parser = parse_on_off, action = clap::ArgAction::Set)]
        klc: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Override the default number of training steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Write the run report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CurateCommand {
    /// Visual-reliance filter over paired generations.
    Vrf {
        /// Paired-generation records, one JSON object per line.
        records: PathBuf,
        /// Engine configuration file (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-sample outcomes here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write aggregate counters here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Hint-assisted consistency filter: emit rater requests, or apply
    /// recorded verdicts.
    Hacf {
        /// Paired-generation records, one JSON object per line.
        records: PathBuf,
        /// Recorded verdicts `{sample_id, verdict}`; applies the filter.
        #[arg(long, conflicts_with = "emit_requests")]
        verdicts: Option<PathBuf>,
        /// Write serialized rater requests here instead of filtering.
        #[arg(long, requires = "hints")]
        emit_requests: Option<PathBuf>,
        /// Descriptor rows `{image_ref, hints}` used when emitting requests.
        #[arg(long)]
        hints: Option<PathBuf>,
        #[arg(long, default_value = "hacf-v1")]
        instructions_id: String,
        /// Write per-sample outcomes here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write aggregate counters here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn parse_on_off(value: &str) -> Result<bool, String> {
    match value {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got {other:?}")),
    }
}

/// CLI failure, carrying the process exit code.
#[derive(Debug)]
enum CliError {
    /// Malformed or semantically invalid input (exit code 1).
    Validation(String),
    /// Filesystem or encoding failure (exit code 2).
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Io(m) => m,
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::Io(m) => CliError::Io(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

macro_rules! validation_error {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}
validation_error!(
    CurationError,
    ResampleError,
    MetricsError,
    SimError,
    RewardError,
    PolicyError,
    HintsError
);

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn load_config(path: &Option<PathBuf>) -> Result<EngineConfig, CliError> {
    match path {
        None => Ok(EngineConfig::default()),
        Some(p) => EngineConfig::from_config_file(p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::InvalidData {
                CliError::Validation(format!("{}: {e}", p.display()))
            } else {
                io_error(p, e)
            }
        }),
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(line).map_err(|e| {
            CliError::Validation(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes one JSON object per line to `out`, or stdout when absent.
fn emit_jsonl<T: Serialize>(items: &[T], out: &Option<PathBuf>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        buf.push(b'\n');
    }
    match out {
        Some(path) => std::fs::write(path, buf).map_err(|e| io_error(path, e)),
        None => std::io::stdout()
            .write_all(&buf)
            .map_err(|e| CliError::Io(e.to_string())),
    }
}

/// Writes one pretty JSON document to `out`, or stdout when absent.
fn emit_json<T: Serialize>(value: &T, out: &Option<PathBuf>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    text.push('\n');
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| io_error(path, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| CliError::Io(e.to_string())),
    }
}

/// Reads a binary (P6) PPM file with 8-bit samples.
fn read_ppm(path: &Path) -> Result<(u32, u32, Vec<u8>), CliError> {
    let data = std::fs::read(path).map_err(|e| io_error(path, e))?;
    let bad = |msg: &str| CliError::Validation(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut next_token = |data: &[u8]| -> Option<String> {
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (start < pos).then(|| String::from_utf8_lossy(&data[start..pos]).into_owned())
    };
    if next_token(&data).as_deref() != Some("P6") {
        return Err(bad("not a binary (P6) PPM file"));
    }
    let mut dim = |name: &str| -> Result<u32, CliError> {
        next_token(&data)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("missing or invalid {name}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(bad("only 8-bit (maxval 255) PPM images are supported"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let need = width as usize * height as usize * 3;
    let pixels = data
        .get(pos..pos + need)
        .ok_or_else(|| bad("pixel data shorter than promised by the header"))?;
    Ok((width, height, pixels.to_vec()))
}

/// One line of `hints` output; also the input format of
/// `curate hacf --hints`.
#[derive(Debug, Serialize, Deserialize)]
struct HintsRow {
    id: String,
    image_ref: String,
    hints: HintVector,
}

#[derive(Debug, Serialize)]
struct EpochPlanOut {
    stage: usize,
    epoch: u64,
    ids: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ResampleReportOut {
    edges: Vec<f64>,
    counts: Vec<usize>,
    weights: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct VerdictRow {
    sample_id: String,
    verdict: String,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    id: String,
    score: f64,
}

fn cmd_reward(
    rollouts: &Path,
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    report: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let mut records = read_rollouts_path(rollouts)?;
    let (_, step) = step_report(&mut records, &cfg)?;
    if let Some(path) = out {
        let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
        write_rollouts(std::io::BufWriter::new(file), &records)?;
    }
    emit_json(&step, report)
}

fn cmd_vrf(
    records: &Path,
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    summary: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let rows: Vec<RawPairRecord> = read_jsonl(records)?;
    let outcomes: Vec<FilterOutcome> = rows
        .iter()
        .map(|r| vrf_filter_record(r, &cfg.vrf))
        .collect();
    let mut counters = CurationSummary::default();
    for o in &outcomes {
        counters.record(o);
    }
    emit_jsonl(&outcomes, out)?;
    if summary.is_some() {
        emit_json(&counters, summary)?;
    } else if out.is_some() {
        emit_json(&counters, &None)?;
    } else {
        eprintln!(
            "{} samples: {} discarded, {} retained",
            counters.total, counters.vrf_discarded, counters.retained
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_hacf(
    records: &Path,
    verdicts: &Option<PathBuf>,
    emit_requests: &Option<PathBuf>,
    hints: &Option<PathBuf>,
    instructions_id: &str,
    out: &Option<PathBuf>,
    summary: &Option<PathBuf>,
) -> Result<(), CliError> {
    let rows: Vec<RawPairRecord> = read_jsonl(records)?;
    if let Some(requests_path) = emit_requests {
        let hints_path = hints
            .as_ref()
            .expect("clap enforces --hints alongside --emit-requests");
        let hint_rows: Vec<HintsRow> = read_jsonl(hints_path)?;
        let by_ref: BTreeMap<&str, &HintVector> = hint_rows
            .iter()
            .map(|h| (h.image_ref.as_str(), &h.hints))
            .collect();
        let mut requests = Vec::with_capacity(rows.len());
        for row in &rows {
            let Some(&h) = by_ref.get(row.image_path.as_str()) else {
                return Err(CliError::Validation(format!(
                    "no hints for image {:?} (sample {:?})",
                    row.image_path, row.sample_id
                )));
            };
            requests.push(RaterRequest {
                rationale: row.rationale.clone(),
                image_ref: row.image_path.clone(),
                hints: *h,
                instructions_id: instructions_id.to_string(),
            });
        }
        return emit_jsonl(&requests, &Some(requests_path.clone()));
    }
    let Some(verdicts_path) = verdicts else {
        return Err(CliError::Validation(
            "pass --verdicts to apply the filter, or --emit-requests to produce rater requests"
                .to_string(),
        ));
    };
    let verdict_rows: Vec<VerdictRow> = read_jsonl(verdicts_path)?;
    let by_sample: BTreeMap<&str, &str> = verdict_rows
        .iter()
        .map(|v| (v.sample_id.as_str(), v.verdict.as_str()))
        .collect();
    let mut outcomes = Vec::new();
    let mut counters = CurationSummary::default();
    for row in &rows {
        match by_sample.get(row.sample_id.as_str()) {
            // Missing or malformed verdicts queue the sample for retry
            // rather than silently deciding either way.
            None => counters.record_retry(&row.sample_id),
            Some(text) => match hacf_apply(&row.sample_id, text) {
                Ok(outcome) => {
                    counters.record(&outcome);
                    outcomes.push(outcome);
                }
                Err(CurationError::RaterProtocolError { .. }) => {
                    counters.record_retry(&row.sample_id)
                }
                Err(e) => return Err(e.into()),
            },
        }
    }
    emit_jsonl(&outcomes, out)?;
    if summary.is_some() {
        emit_json(&counters, summary)?;
    } else if out.is_some() {
        emit_json(&counters, &None)?;
    } else {
        eprintln!(
            "{} samples: {} discarded, {} retained, {} queued for retry",
            counters.total,
            counters.hacf_discarded,
            counters.retained,
            counters.retry.len()
        );
    }
    Ok(())
}

fn cmd_hints(manifest: &Path, out: &Option<PathBuf>) -> Result<(), CliError> {
    let records: Vec<DatasetRecord> = read_jsonl(manifest)?;
    let mut rows = Vec::with_capacity(records.len());
    for record in &records {
        let path = PathBuf::from(&record.path);
        let (width, height, rgb) = read_ppm(&path)?;
        let mut hints = compute_hints(&rgb, width as usize, height as usize)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        hints.mos = Some(record.mos);
        rows.push(HintsRow {
            id: record.id.clone(),
            image_ref: record.path.clone(),
            hints,
        });
    }
    emit_jsonl(&rows, out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_resample(
    manifest: &Path,
    stage: usize,
    epoch: u64,
    epoch_size: Option<usize>,
    seed: u64,
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    report: &Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let records: Vec<DatasetRecord> = read_jsonl(manifest)?;
    let edges = uniform_edges(1.0, 5.0, cfg.resample.bins)?;
    let epoch_size = epoch_size.unwrap_or(records.len());
    let (plan, assignment, weights) = plan_epoch(
        &records,
        &cfg.resample,
        &edges,
        stage,
        epoch,
        seed,
        epoch_size,
    )?;
    if let Some(path) = report {
        emit_json(
            &ResampleReportOut {
                edges: assignment.edges.clone(),
                counts: assignment.counts.clone(),
                weights,
            },
            &Some(path.clone()),
        )?;
    }
    let ids = plan
        .indices
        .iter()
        .map(|&i| records[i].id.clone())
        .collect();
    emit_json(
        &EpochPlanOut {
            stage: plan.stage,
            epoch: plan.epoch,
            ids,
        },
        out,
    )
}

fn cmd_eval(predictions: &Path, manifest: &Path) -> Result<(), CliError> {
    let mut reader = csv::Reader::from_path(predictions)
        .map_err(|e| io_error(predictions, e))?;
    let mut preds = Vec::new();
    for (i, row) in reader.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| {
            CliError::Validation(format!("{}: row {}: {e}", predictions.display(), i + 1))
        })?;
        preds.push(row);
    }
    let records: Vec<DatasetRecord> = read_jsonl(manifest)?;
    let mos_of: BTreeMap<&str, f64> = records
        .iter()
        .map(|r| (r.id.as_str(), r.mos))
        .collect();
    let mut xs = Vec::with_capacity(preds.len());
    let mut ys = Vec::with_capacity(preds.len());
    for p in &preds {
        let Some(&mos) = mos_of.get(p.id.as_str()) else {
            return Err(CliError::Validation(format!(
                "prediction {:?} has no manifest entry",
                p.id
            )));
        };
        xs.push(p.score);
        ys.push(mos);
    }
    let report = eval_report(&xs, &ys)?;
    emit_json(&report, &None)
}

fn cmd_train_sim(
    klc_on: bool,
    seed: u64,
    steps: Option<usize>,
    report: &Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    if let Some(steps) = steps {
        cfg.steps = steps;
    }
    let run = run_experiment(&cfg, klc_on)?;
    emit_json(&run, report)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Reward {
            rollouts,
            config,
            out,
            report,
        } => cmd_reward(rollouts, config, out, report),
        Command::Curate { filter } => match filter {
            CurateCommand::Vrf {
                records,
                config,
                out,
                summary,
            } => cmd_vrf(records, config, out, summary),
            CurateCommand::Hacf {
                records,
                verdicts,
                emit_requests,
                hints,
                instructions_id,
                out,
                summary,
            } => cmd_hacf(
                records,
                verdicts,
                emit_requests,
                hints,
                instructions_id,
                out,
                summary,
            ),
        },
        Command::Hints { manifest, out } => cmd_hints(manifest, out),
        Command::Resample {
            manifest,
            stage,
            epoch,
            epoch_size,
            seed,
            config,
            out,
            report,
        } => cmd_resample(
            manifest,
            *stage,
            *epoch,
            *epoch_size,
            *seed,
            config,
            out,
            report,
        ),
        Command::Eval {
            predictions,
            manifest,
        } => cmd_eval(predictions, manifest),
        Command::TrainSim {
            klc,
            seed,
            steps,
            report,
        } => cmd_train_sim(*klc, *seed, *steps, report),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {}", e.message());
        std::process::exit(e.exit_code());
    }
}
