//! Command-line interface.
//!
//! Exit codes: 0 success, 2 usage, parse, IO or config error, 3 data
//! consistency error.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use speechfix_core::alignment::{dtw_align, CostSpec, EditOp};
use speechfix_core::dataset::{self, IssueType};
use speechfix_core::losses::{dpo_loss, masked_dpo_loss, LossError};
use speechfix_core::metrics::{self, MetricReport};
use speechfix_core::preference::{
    build_pairs, pair_to_dpo_inputs, DpoSettings, EvaluatedSample, PairMode, PreferencePair, ProviderError,
    Residuals,
};
use speechfix_core::sim::{SimEditor, SimEvaluator};
use speechfix_core::{TextSequence, TimeScope};

use crate::batch::{self, Adapters};
use crate::config::{ConfigError, RunConfig};
use crate::io::{self, IoError};
use crate::protocol;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "speechfix", version, about = "Speech error localization and iterative correction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CostArg {
    Default,
    Unit,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PairModeArg {
    Extreme,
    All,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, env = crate::config::CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Align two sentences and print the warping path.
    Align {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long, value_enum, default_value = "default")]
        cost: CostArg,
    },
    /// Run the correction loop over every sample in a manifest.
    Correct {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iter: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate an annotated manifest and tracks with the simulator.
    Simulate {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions against manifest annotations.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pred: PathBuf,
    },
    /// Build preference pairs from evaluated samples.
    Pairs {
        #[arg(long)]
        evaluations: PathBuf,
        #[arg(long, value_enum, default_value = "extreme")]
        mode: PairModeArg,
    },
    /// Compute preference losses for pairs.
    Dpo {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        residuals: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        masked: bool,
        #[arg(long)]
        timestep: Option<u32>,
        #[arg(long)]
        horizon: Option<u32>,
        #[arg(long)]
        hop: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Seeded simulate-and-correct experiment; writes a failure curve report.
    Experiment {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_iter: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Export the failure curve of a report as CSV.
    Curve {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-issue-type statistics of a manifest as CSV.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified train/val/test split of a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Serve the simulated evaluator and editor over the line protocol.
    ServeSim {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(msg) | Failure::Data(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn run(cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::Align { reference, hyp, cost } => cmd_align(&reference, &hyp, cost),
        Cmd::Correct {
            manifest,
            out,
            max_iter,
            seed,
            cfg,
        } => {
            let mut config = resolve(&cfg)?;
            if let Some(m) = max_iter {
                config.correction.max_iter = m;
            }
            if let Some(s) = seed {
                config.sim.seed = s;
            }
            cmd_correct(&manifest, &out, &finish(config)?)
        }
        Cmd::Simulate {
            targets,
            n,
            seed,
            out,
            cfg,
        } => {
            let mut config = resolve(&cfg)?;
            if let Some(s) = seed {
                config.sim.seed = s;
            }
            cmd_simulate(&targets, n, &out, &finish(config)?)
        }
        Cmd::Evaluate { manifest, pred } => cmd_evaluate(&manifest, &pred),
        Cmd::Pairs { evaluations, mode } => cmd_pairs(&evaluations, mode),
        Cmd::Dpo {
            pairs,
            residuals,
            beta,
            masked,
            timestep,
            horizon,
            hop,
            cfg,
        } => {
            let mut config = resolve(&cfg)?;
            let d = &mut config.dpo;
            d.beta = beta.unwrap_or(d.beta);
            d.timestep = timestep.unwrap_or(d.timestep);
            d.horizon = horizon.unwrap_or(d.horizon);
            d.hop_s = hop.unwrap_or(d.hop_s);
            cmd_dpo(&pairs, &residuals, masked, &finish(config)?)
        }
        Cmd::Experiment {
            targets,
            n,
            seed,
            max_iter,
            out,
            cfg,
        } => {
            let mut config = resolve(&cfg)?;
            if let Some(s) = seed {
                config.sim.seed = s;
            }
            if let Some(m) = max_iter {
                config.correction.max_iter = m;
            }
            cmd_experiment(&targets, n, &out, &finish(config)?)
        }
        Cmd::Curve { report, out } => cmd_curve(&report, &out),
        Cmd::Stats { manifest, out } => cmd_stats(&manifest, out.as_deref()),
        Cmd::Split { manifest, seed, cfg } => {
            let mut config = resolve(&cfg)?;
            if let Some(s) = seed {
                config.split.seed = s;
            }
            cmd_split(&manifest, &finish(config)?)
        }
        Cmd::ServeSim { cfg } => {
            let config = finish(resolve(&cfg)?)?;
            let stdin = std::io::stdin();
            protocol::serve(
                stdin.lock(),
                std::io::stdout().lock(),
                &SimEvaluator { config: config.sim },
                &SimEditor { config: config.sim },
            )
            .map_err(|e| Failure::Usage(e.to_string()))
        }
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(w) = args.workers {
        config.workers = w;
    }
    Ok(config)
}

/// Validates the merged config and echoes it to stderr.
fn finish(config: RunConfig) -> Result<RunConfig, Failure> {
    config.validate()?;
    eprintln!("config {} {} workers={}", config.hash(), config.to_json(), config.workers);
    Ok(config)
}

fn hash_of(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

/// Echoes the options of a command without a run config and returns their
/// hash.
fn echo_options(value: &serde_json::Value) -> String {
    let h = hash_of(value);
    eprintln!("config {h} {value}");
    h
}

fn print_line(value: &impl Serialize) -> CmdResult {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    writeln!(out).map_err(|e| Failure::Usage(e.to_string()))
}

fn read_sentence(path: &Path) -> Result<TextSequence, Failure> {
    let text = io::read_text(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines
        .next()
        .ok_or_else(|| Failure::Usage(format!("{}: no sentence", path.display())))?;
    if lines.next().is_some() {
        return Err(Failure::Usage(format!("{}: expected one sentence", path.display())));
    }
    Ok(TextSequence::parse(first))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AlignRecord {
    pub config_hash: String,
    pub cost: String,
    pub total_cost: f64,
    pub path: Vec<(usize, usize)>,
    pub ops: Vec<EditOp>,
}

fn cmd_align(reference: &Path, hyp: &Path, cost: CostArg) -> CmdResult {
    let (name, spec) = match cost {
        CostArg::Default => ("default", CostSpec::default()),
        CostArg::Unit => ("unit", CostSpec::unit()),
    };
    let config_hash = echo_options(&json!({ "command": "align", "cost": name }));
    let r = read_sentence(reference)?;
    let h = read_sentence(hyp)?;
    let a = dtw_align(&r, &h, &spec);
    print_line(&AlignRecord {
        config_hash,
        cost: name.into(),
        total_cost: a.total_cost(),
        path: a.path.steps,
        ops: a.ops,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: RunConfig,
    pub n_requested: usize,
    pub n_written: usize,
    pub skipped: Vec<batch::SkippedTarget>,
}

fn load_targets(path: &Path) -> Result<Vec<TextSequence>, Failure> {
    let targets = batch::parse_targets(&io::read_text(path)?);
    if targets.is_empty() {
        return Err(Failure::Usage(format!("{}: no target sentences", path.display())));
    }
    Ok(targets)
}

fn cmd_simulate(targets: &Path, n: usize, out: &Path, config: &RunConfig) -> CmdResult {
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let targets = load_targets(targets)?;
    let sim = batch::simulate_corpus(&targets, n, &config.sim, config.workers);
    for s in &sim.skipped {
        eprintln!("skipped target for {}: {}", batch::sample_name(s.index), s.reason);
    }
    for s in &sim.samples {
        io::save_track(&out.join(&s.sample.track_path), &s.track)?;
    }
    let samples: Vec<_> = sim.samples.iter().map(|s| s.sample.clone()).collect();
    io::write_jsonl(&out.join("manifest.jsonl"), &samples)?;
    io::write_json(
        &out.join("run.json"),
        &RunRecord {
            config_hash: config.hash(),
            config: config.clone(),
            n_requested: n,
            n_written: samples.len(),
            skipped: sim.skipped,
        },
    )?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub config_hash: String,
    pub config: RunConfig,
    #[serde(flatten)]
    pub summary: batch::CorrectionSummary,
}

fn cmd_correct(manifest_path: &Path, out: &Path, config: &RunConfig) -> CmdResult {
    let manifest = io::load_manifest(manifest_path)?;
    let adapters = Adapters::from_config(config).map_err(|e| Failure::Usage(e.to_string()))?;
    let results = batch::correct_manifest(
        &manifest.samples,
        manifest_path,
        &config.correction,
        &adapters,
        config.workers,
    );
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        if let Some(msg) = &r.record.failure {
            eprintln!("sample {}: {msg}", r.record.id);
        }
        if let (Some(rel), Some(o)) = (&r.record.track_path, &r.outcome) {
            io::save_track(&out.join(rel), &o.final_track)?;
        }
        records.push(r.record);
    }
    io::write_jsonl(&out.join("outcomes.jsonl"), &records)?;
    io::write_json(
        &out.join("summary.json"),
        &SummaryRecord {
            config_hash: config.hash(),
            config: config.clone(),
            summary: batch::summarize(&records, config.correction.max_iter),
        },
    )?;
    Ok(())
}

/// One line of a prediction file for `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub transcript: TextSequence,
    pub scope: TimeScope,
    pub quality: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_probs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluateRecord {
    pub config_hash: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

fn cmd_evaluate(manifest_path: &Path, pred_path: &Path) -> CmdResult {
    let config_hash = echo_options(&json!({ "command": "evaluate" }));
    let manifest = io::load_manifest(manifest_path)?;
    let preds: Vec<Prediction> = io::read_jsonl(pred_path)?;
    if preds.is_empty() {
        return Err(Failure::Data(format!("{}: no predictions", pred_path.display())));
    }
    let mut by_id: HashMap<&str, &Prediction> = HashMap::new();
    for p in &preds {
        if by_id.insert(p.id.as_str(), p).is_some() {
            return Err(Failure::Data(format!("duplicate prediction for {}", p.id)));
        }
    }
    let known: HashMap<&str, ()> = manifest.samples.iter().map(|s| (s.id.as_str(), ())).collect();
    let mut unmatched: Vec<&str> = manifest
        .samples
        .iter()
        .map(|s| s.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    unmatched.extend(preds.iter().map(|p| p.id.as_str()).filter(|id| !known.contains_key(id)));
    if !unmatched.is_empty() {
        for id in &unmatched {
            eprintln!("unmatched id {id}");
        }
        return Err(Failure::Data(format!("{} unmatched ids", unmatched.len())));
    }

    let paired: Vec<_> = manifest.samples.iter().map(|s| (s, by_id[s.id.as_str()])).collect();
    let wer = metrics::corpus_wer(paired.iter().map(|(s, p)| (&s.transcript, &p.transcript)))
        .map_err(|e| Failure::Data(e.to_string()))?;
    let erroneous: Vec<_> = paired
        .iter()
        .filter(|(s, p)| s.issue_type != IssueType::Clean && !(s.error_scope.is_empty() && p.scope.is_empty()))
        .map(|(s, p)| (&p.scope, &s.error_scope))
        .collect();
    let iou = metrics::mean_iou(erroneous.iter().copied()).ok();
    let mse_clean = metrics::mse_clean(
        paired
            .iter()
            .filter(|(s, _)| s.issue_type == IssueType::Clean)
            .filter_map(|(_, p)| p.frame_probs.as_deref()),
    )
    .ok();
    let predicted: Vec<f64> = paired.iter().map(|(_, p)| p.quality).collect();
    let annotated: Vec<f64> = paired.iter().map(|(s, _)| s.quality.value()).collect();
    let utt_pcc = metrics::utt_pcc(&predicted, &annotated).ok();
    let sys_srcc = if paired.iter().all(|(_, p)| p.system.is_some()) {
        let (_, p, a) = metrics::system_means(
            paired
                .iter()
                .map(|(s, p)| (p.system.as_deref().expect("checked"), p.quality, s.quality.value())),
        );
        metrics::sys_srcc(&p, &a).ok()
    } else {
        None
    };
    print_line(&EvaluateRecord {
        config_hash,
        report: MetricReport {
            wer,
            iou,
            mse_clean,
            utt_pcc,
            sys_srcc,
            failure_rate: None,
        },
    })
}

fn cmd_pairs(path: &Path, mode: PairModeArg) -> CmdResult {
    let mode = match mode {
        PairModeArg::Extreme => PairMode::Extreme,
        PairModeArg::All => PairMode::All,
    };
    echo_options(&json!({ "command": "pairs", "mode": mode }));
    let samples: Vec<EvaluatedSample> = io::read_jsonl(path)?;
    let report = build_pairs(&samples, mode);
    for s in &report.skipped {
        eprintln!("skipped {}", serde_json::to_string(s).expect("serializes"));
    }
    print!("{}", io::to_jsonl(&report.pairs));
    Ok(())
}

/// One line of a residual file for `dpo`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRecord {
    pub id: String,
    #[serde(flatten)]
    pub residuals: Residuals,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairLoss {
    pub pair_id: String,
    pub loss: f64,
    /// Set when the masked loss was requested but the loser's mask was
    /// empty, so the unmasked loss was used.
    pub fallback: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DpoRecord {
    pub config_hash: String,
    pub beta: f64,
    pub timestep: u32,
    pub horizon: u32,
    pub hop_s: f64,
    pub masked: bool,
    pub pairs: Vec<PairLoss>,
    pub mean: f64,
}

fn loss_failure(pair: &PreferencePair, e: LossError) -> Failure {
    Failure::Usage(format!("pair {}: {e}", pair.pair_id()))
}

fn cmd_dpo(pairs_path: &Path, residuals_path: &Path, masked: bool, config: &RunConfig) -> CmdResult {
    let pairs: Vec<PreferencePair> = io::read_jsonl(pairs_path)?;
    if pairs.is_empty() {
        return Err(Failure::Data(format!("{}: no pairs", pairs_path.display())));
    }
    let mut provider = BTreeMap::new();
    for r in io::read_jsonl::<ResidualRecord>(residuals_path)? {
        if provider.insert(r.id.clone(), r.residuals).is_some() {
            return Err(Failure::Data(format!("duplicate residuals for {}", r.id)));
        }
    }
    let d = config.dpo;
    let settings = DpoSettings {
        beta: d.beta,
        timestep: d.timestep,
        horizon: d.horizon,
        hop_s: d.hop_s,
    };
    let mut losses = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let inputs = pair_to_dpo_inputs(pair, &provider, &settings).map_err(|e| match e {
            ProviderError::Missing(_) => Failure::Data(format!("pair {}: {e}", pair.pair_id())),
            ProviderError::ProviderMismatch(..) => Failure::Usage(format!("pair {}: {e}", pair.pair_id())),
        })?;
        let (loss, fallback) = if masked {
            match masked_dpo_loss(&inputs) {
                Ok(l) => (l, false),
                Err(LossError::EmptyMask(_)) => (dpo_loss(&inputs).map_err(|e| loss_failure(pair, e))?, true),
                Err(e) => return Err(loss_failure(pair, e)),
            }
        } else {
            (dpo_loss(&inputs).map_err(|e| loss_failure(pair, e))?, false)
        };
        losses.push(PairLoss {
            pair_id: pair.pair_id(),
            loss,
            fallback,
        });
    }
    let mean = losses.iter().map(|l| l.loss).sum::<f64>() / losses.len() as f64;
    print_line(&DpoRecord {
        config_hash: config.hash(),
        beta: d.beta,
        timestep: d.timestep,
        horizon: d.horizon,
        hop_s: d.hop_s,
        masked,
        pairs: losses,
        mean,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub config: RunConfig,
    #[serde(flatten)]
    pub report: speechfix_core::sim::ExperimentReport,
}

fn cmd_experiment(targets: &Path, n: usize, out: &Path, config: &RunConfig) -> CmdResult {
    if n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let targets = load_targets(targets)?;
    let report = batch::run_experiment_parallel(n, &targets, &config.sim, &config.correction, config.workers);
    io::write_json(
        out,
        &ExperimentRecord {
            config_hash: config.hash(),
            config: config.clone(),
            report,
        },
    )?;
    Ok(())
}

#[derive(Deserialize)]
struct CurveOnly {
    curve: Vec<f64>,
}

/// CSV with header `iteration,failure_rate`.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("iteration,failure_rate\n");
    for (k, v) in curve.iter().enumerate() {
        s += &format!("{k},{v}\n");
    }
    s
}

fn cmd_curve(report: &Path, out: &Path) -> CmdResult {
    echo_options(&json!({ "command": "curve" }));
    let r: CurveOnly = io::read_json(report)?;
    io::write_text(out, &curve_csv(&r.curve))?;
    Ok(())
}

fn cmd_stats(manifest: &Path, out: Option<&Path>) -> CmdResult {
    echo_options(&json!({ "command": "stats" }));
    let m = io::load_manifest(manifest)?;
    let table = dataset::stats(&m).map_err(|e| Failure::Data(e.to_string()))?;
    let csv = table.to_csv();
    match out {
        Some(p) => io::write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub config_hash: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn cmd_split(manifest_path: &Path, config: &RunConfig) -> CmdResult {
    let text = io::read_text(manifest_path)?;
    let ratios = config.split.ratios()?;
    let m = io::parse_manifest(&text, manifest_path, ratios)?;
    let split = dataset::split(&m, config.split.seed).map_err(|e| Failure::Data(e.to_string()))?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| m.samples[i].id.clone()).collect::<Vec<_>>();
    print_line(&SplitRecord {
        config_hash: config.hash(),
        train: ids(&split.train),
        val: ids(&split.val),
        test: ids(&split.test),
    })
}
