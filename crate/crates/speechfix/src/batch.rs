//! Per-sample work fanned out over a worker pool. Results come back in input
//! order, and every sample draws from its own keyed random streams, so the
//! worker count never changes the output.

use std::path::Path;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use speechfix_core::correction::{
    correct, AdapterError, CorrectionConfig, CorrectionOutcome, Editor, Evaluator, Snapshot,
};
use speechfix_core::dataset::{FgesSample, IssueType};
use speechfix_core::rng::key_of;
use speechfix_core::sim::{
    aggregate, quality_of, run_sample, simulate_tts, target_for, ExcludedSample, ExperimentReport,
    SampleRun, SimConfig, SimEditor, SimEvaluator,
};
use speechfix_core::{SpeechTrack, TextSequence, TimeScope};

use crate::config::{AdapterSpec, RunConfig};
use crate::io;
use crate::protocol::ProcessAdapter;

/// Runs `f` on `0..n` with `workers` threads (0 = one per core).
pub fn par_indices<R, F>(n: usize, workers: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| (0..n).into_par_iter().map(&f).collect())
}

/// Reads a target corpus: one sentence per non-blank line.
pub fn parse_targets(text: &str) -> Vec<TextSequence> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(TextSequence::parse)
        .collect()
}

pub fn sample_name(index: usize) -> String {
    format!("sample-{index:05}")
}

#[derive(Debug, Clone)]
pub struct SimulatedSample {
    pub sample: FgesSample,
    pub track: SpeechTrack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedTarget {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Simulation {
    pub samples: Vec<SimulatedSample>,
    pub skipped: Vec<SkippedTarget>,
}

/// Generates `n` annotated samples. Sample `i` uses target line
/// `i mod len(targets)` and random key `i`; annotations are exact.
pub fn simulate_corpus(targets: &[TextSequence], n: usize, config: &SimConfig, workers: usize) -> Simulation {
    let results = par_indices(n, workers, |i| {
        let target = target_for(targets, i).ok_or_else(|| "empty target corpus".to_string())?;
        let (track, injection) = simulate_tts(target, config, i as u64).map_err(|e| e.to_string())?;
        let id = sample_name(i);
        let sample = FgesSample {
            track_path: format!("tracks/{id}.json"),
            id,
            target_text: target.clone(),
            error_scope: injection.truth_scope.clone(),
            quality: quality_of(&track, injection.truth_scope.total_length(), config),
            issue_type: injection.issue_type,
            transcript: injection.truth_transcript,
            audio_len_s: track.duration(),
        };
        Ok(SimulatedSample { sample, track })
    });
    let mut sim = Simulation::default();
    for (index, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => sim.samples.push(s),
            Err(reason) => sim.skipped.push(SkippedTarget { index, reason }),
        }
    }
    sim
}

/// Evaluator and editor selected by the run config.
pub struct Adapters {
    pub evaluator: Box<dyn Evaluator + Send + Sync>,
    pub editor: Box<dyn Editor + Send + Sync>,
}

impl Adapters {
    pub fn from_config(config: &RunConfig) -> Result<Self, AdapterError> {
        let sim = config.sim;
        let evaluator: Box<dyn Evaluator + Send + Sync> = match &config.adapters.evaluator {
            AdapterSpec::Sim => Box::new(SimEvaluator { config: sim }),
            AdapterSpec::Process { command, timeout_ms } => {
                Box::new(ProcessAdapter::spawn(command, Duration::from_millis(*timeout_ms))?)
            }
        };
        let editor: Box<dyn Editor + Send + Sync> = match &config.adapters.editor {
            AdapterSpec::Sim => Box::new(SimEditor { config: sim }),
            AdapterSpec::Process { command, timeout_ms } => {
                Box::new(ProcessAdapter::spawn(command, Duration::from_millis(*timeout_ms))?)
            }
        };
        Ok(Self { evaluator, editor })
    }
}

/// One line of `outcomes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub id: String,
    pub issue_type: IssueType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_path: Option<String>,
    pub iterations_used: u32,
    pub corrected: bool,
    pub snapshots: Vec<Snapshot>,
    pub cumulative_mask: TimeScope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SampleCorrection {
    pub record: OutcomeRecord,
    pub outcome: Option<CorrectionOutcome>,
}

/// Loads each sample's track and runs the correction loop on it. A sample
/// whose track cannot be read, or whose adapters fail, is reported in its
/// record and the batch continues.
pub fn correct_manifest(
    samples: &[FgesSample],
    manifest_path: &Path,
    correction: &CorrectionConfig,
    adapters: &Adapters,
    workers: usize,
) -> Vec<SampleCorrection> {
    par_indices(samples.len(), workers, |i| {
        let s = &samples[i];
        let failed = |reason: String| SampleCorrection {
            record: OutcomeRecord {
                id: s.id.clone(),
                issue_type: s.issue_type,
                track_path: None,
                iterations_used: 0,
                corrected: false,
                snapshots: Vec::new(),
                cumulative_mask: TimeScope::empty(),
                failure: Some(reason),
            },
            outcome: None,
        };
        let track = match io::load_track(&io::resolve_track_path(manifest_path, &s.track_path)) {
            Ok(t) => t,
            Err(e) => return failed(e.to_string()),
        };
        let outcome = match correct(
            &track,
            &s.target_text,
            adapters.evaluator.as_ref(),
            adapters.editor.as_ref(),
            correction,
            key_of(&s.id),
        ) {
            Ok(o) => o,
            Err(e) => return failed(e.to_string()),
        };
        SampleCorrection {
            record: OutcomeRecord {
                id: s.id.clone(),
                issue_type: s.issue_type,
                track_path: outcome
                    .failure
                    .is_none()
                    .then(|| format!("tracks/{}.json", s.id)),
                iterations_used: outcome.iterations_used,
                corrected: outcome.corrected,
                snapshots: outcome.per_iteration.clone(),
                cumulative_mask: outcome.cumulative_mask.clone(),
                failure: outcome.failure.clone(),
            },
            outcome: Some(outcome),
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub n_samples: usize,
    /// Mean per-sample WER at the first and the last evaluation.
    pub pre_wer: Option<f64>,
    pub post_wer: Option<f64>,
    #[serde(flatten)]
    pub report: ExperimentReport,
}

/// Pass/fail trajectory of one record, padded with its last state.
pub fn trajectory(record: &OutcomeRecord, max_iter: u32) -> Option<Vec<bool>> {
    if record.failure.is_some() || record.snapshots.is_empty() {
        return None;
    }
    let mut passed: Vec<bool> = record.snapshots.iter().map(|s| s.passed).collect();
    let last = *passed.last().expect("nonempty");
    passed.resize(max_iter as usize + 1, last);
    Some(passed)
}

pub fn summarize(records: &[OutcomeRecord], max_iter: u32) -> CorrectionSummary {
    let runs: Vec<Result<SampleRun, ExcludedSample>> = records
        .iter()
        .map(|r| {
            let sample_id = key_of(&r.id);
            trajectory(r, max_iter)
                .map(|passed| SampleRun {
                    sample_id,
                    issue_type: r.issue_type,
                    passed,
                    iterations_used: r.iterations_used,
                })
                .ok_or_else(|| ExcludedSample {
                    sample_id,
                    reason: format!("{}: {}", r.id, r.failure.as_deref().unwrap_or("not evaluated")),
                })
        })
        .collect();
    let included: Vec<&OutcomeRecord> = records.iter().filter(|r| trajectory(r, max_iter).is_some()).collect();
    let mean = |f: &dyn Fn(&OutcomeRecord) -> f64| {
        (!included.is_empty()).then(|| included.iter().map(|r| f(r)).sum::<f64>() / included.len() as f64)
    };
    CorrectionSummary {
        n_samples: records.len(),
        pre_wer: mean(&|r| r.snapshots[0].wer),
        post_wer: mean(&|r| r.snapshots.last().expect("nonempty").wer),
        report: aggregate(&runs, max_iter),
    }
}

/// Seeded experiment: sample `i` is generated from target `i mod len` with
/// key `i` and corrected with the simulated adapters.
pub fn run_experiment_parallel(
    n: usize,
    targets: &[TextSequence],
    sim: &SimConfig,
    correction: &CorrectionConfig,
    workers: usize,
) -> ExperimentReport {
    let results = par_indices(n, workers, |i| {
        let target = target_for(targets, i).expect("nonempty corpus");
        run_sample(i as u64, target, sim, correction).map_err(|e| ExcludedSample {
            sample_id: i as u64,
            reason: e.to_string(),
        })
    });
    aggregate(&results, correction.max_iter)
}
