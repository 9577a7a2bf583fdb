//! The iterative correction loop: evaluate, align the transcript against the
//! target, mask the implicated time spans and regenerate them, until the
//! evaluation gate passes or the iteration budget runs out.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{discrepancy_intervals, dtw_align, CostSpec, DiscrepancySet};
use crate::scope::{TimeInterval, TimeScope};
use crate::text::TextSequence;
use crate::track::{QualityScore, SpeechTrack};

/// One evaluator pass over a track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub transcript: TextSequence,
    pub scope: TimeScope,
    pub quality: QualityScore,
}

/// Identifies an adapter invocation so that seeded backends can key their
/// random streams on it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallContext {
    pub sample_id: u64,
    pub iteration: u32,
    /// Position of the edited interval within one refinement, counted in
    /// processing order (right to left).
    pub part: u32,
}

/// Failure reported by an adapter.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct AdapterError(pub String);

pub trait Evaluator {
    fn evaluate(
        &self,
        track: &SpeechTrack,
        target: &TextSequence,
        ctx: CallContext,
    ) -> Result<EvaluationReport, AdapterError>;
}

pub trait Editor {
    /// Regenerates the masked part of `track`. Frames outside the mask must
    /// come back unchanged.
    fn edit(
        &self,
        track: &SpeechTrack,
        mask: &TimeScope,
        target: &TextSequence,
        ctx: CallContext,
    ) -> Result<SpeechTrack, AdapterError>;
}

impl<T: Evaluator + ?Sized> Evaluator for &T {
    fn evaluate(
        &self,
        track: &SpeechTrack,
        target: &TextSequence,
        ctx: CallContext,
    ) -> Result<EvaluationReport, AdapterError> {
        (**self).evaluate(track, target, ctx)
    }
}

impl<T: Editor + ?Sized> Editor for &T {
    fn edit(
        &self,
        track: &SpeechTrack,
        mask: &TimeScope,
        target: &TextSequence,
        ctx: CallContext,
    ) -> Result<SpeechTrack, AdapterError> {
        (**self).edit(track, mask, target, ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorrectionError {
    #[error("invalid correction config: {0}")]
    InvalidConfig(&'static str),
    #[error("evaluator failed at iteration {iteration}: {source}")]
    EvaluatorFailure {
        iteration: u32,
        source: AdapterError,
    },
    #[error("editor failed at iteration {iteration}, part {part}: {reason}")]
    EditorFailure {
        iteration: u32,
        part: u32,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginPolicy {
    /// Each masked interval grows on both sides by its own duration divided
    /// by the number of mismatched words overlapping it.
    UniformPartition,
    /// Constant margin in seconds.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub max_iter: u32,
    pub wer_gate: f64,
    pub quality_gate: f64,
    pub margin_policy: MarginPolicy,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            max_iter: 2,
            wer_gate: 0.0,
            quality_gate: 6.0,
            margin_policy: MarginPolicy::UniformPartition,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<(), CorrectionError> {
        if self.max_iter < 1 {
            return Err(CorrectionError::InvalidConfig("max_iter must be at least 1"));
        }
        if !(self.wer_gate.is_finite() && self.wer_gate >= 0.0) {
            return Err(CorrectionError::InvalidConfig("wer_gate must be nonnegative"));
        }
        if !(QualityScore::MIN..=QualityScore::MAX).contains(&self.quality_gate) {
            return Err(CorrectionError::InvalidConfig("quality_gate must lie in [1, 10]"));
        }
        if let MarginPolicy::Fixed(m) = self.margin_policy {
            if !(m.is_finite() && m >= 0.0) {
                return Err(CorrectionError::InvalidConfig("fixed margin must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// `wer <= wer_gate && quality >= quality_gate`.
pub fn gate(wer: f64, quality: QualityScore, config: &CorrectionConfig) -> bool {
    wer <= config.wer_gate && quality.value() >= config.quality_gate
}

/// State of the track as seen by the evaluator at the head of an iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: u32,
    pub wer: f64,
    pub quality: f64,
    pub error_scope: TimeScope,
    pub discrepancies: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub final_track: SpeechTrack,
    pub iterations_used: u32,
    pub per_iteration: Vec<Snapshot>,
    pub corrected: bool,
    /// Every span handed to the editor, in the input track's time base.
    pub cumulative_mask: TimeScope,
    /// For each frame of `final_track`, the index of the input frame it was
    /// carried over from, or `None` if the editor produced it.
    pub provenance: Vec<Option<usize>>,
    /// Set when an adapter failure cut the run short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

fn word_error_rate(target: &TextSequence, transcript: &TextSequence, ops: usize) -> f64 {
    let n = target.word_count();
    let errors = if ops == 0 {
        0
    } else {
        crate::metrics::wer_counts(target, transcript).errors()
    };
    if n == 0 {
        // no reference words: every hypothesis word is an insertion
        errors as f64
    } else {
        errors as f64 / n as f64
    }
}

fn full_interval(track: &SpeechTrack) -> Option<TimeInterval> {
    TimeInterval::checked(0.0, track.duration())
}

/// Mask for one refinement: evaluator scope plus the time spans of the
/// mismatched words, extended by the margin policy and clamped to the track.
pub fn build_mask(
    scope: &TimeScope,
    o: &DiscrepancySet,
    reference: &TextSequence,
    track: &SpeechTrack,
    policy: MarginPolicy,
) -> TimeScope {
    let per_op: Vec<Vec<TimeInterval>> = o
        .ops
        .iter()
        .map(|op| {
            let single = DiscrepancySet { ops: vec![*op] };
            match discrepancy_intervals(&single, reference, track) {
                Ok(mut v) => v.pop().unwrap_or_default(),
                // a word the track never attempted: it could be anywhere
                Err(_) => full_interval(track).into_iter().collect(),
            }
        })
        .collect();
    let mapped = TimeScope::from_intervals(per_op.iter().flatten().copied());
    let base = scope.union(&mapped);
    if base.is_empty() {
        return base;
    }
    let extended = match policy {
        MarginPolicy::Fixed(m) => base.extend_each(|_| m),
        MarginPolicy::UniformPartition => base.extend_each(|iv| {
            let words = per_op
                .iter()
                .filter(|ivs| ivs.iter().any(|w| w.overlaps(iv)))
                .count();
            iv.length() / words.max(1) as f64
        }),
    };
    extended.clamp(track.duration())
}

fn refine_tracked<E: Editor + ?Sized>(
    track: &SpeechTrack,
    mask: &TimeScope,
    target: &TextSequence,
    editor: &E,
    ctx: CallContext,
    provenance: &mut Vec<Option<usize>>,
    touched: &mut Vec<Range<usize>>,
) -> Result<SpeechTrack, CorrectionError> {
    let mut cur = track.clone();
    let runs = track.frame_runs(mask);
    for (part, run) in runs.iter().rev().enumerate() {
        let part = part as u32;
        let fail = |reason: String| CorrectionError::EditorFailure {
            iteration: ctx.iteration,
            part,
            reason,
        };
        let Some(iv) = TimeInterval::checked(cur.time_of(run.start), cur.time_of(run.end)) else {
            continue;
        };
        let call = CallContext { part, ..ctx };
        let out = editor
            .edit(&cur, &TimeScope::single(iv), target, call)
            .map_err(|e| fail(e.0))?;
        let (n, m) = (cur.frame_count(), out.frame_count());
        let tail = n - run.end;
        if m < run.start + tail
            || out.frames()[..run.start] != cur.frames()[..run.start]
            || out.frames()[m - tail..] != cur.frames()[run.end..]
        {
            return Err(fail(format!(
                "frames outside [{}, {}) were modified",
                run.start, run.end
            )));
        }
        touched.extend(provenance[run.clone()].iter().flatten().map(|&k| k..k + 1));
        let inserted = m - run.start - tail;
        provenance.splice(run.clone(), core::iter::repeat(None).take(inserted));
        cur = out;
    }
    Ok(cur)
}

/// Regenerates every masked span with `editor`, one span at a time from the
/// right so that earlier spans keep their positions. The editor's output is
/// checked against the input outside each span.
pub fn refine<E: Editor + ?Sized>(
    track: &SpeechTrack,
    mask: &TimeScope,
    target: &TextSequence,
    editor: &E,
    ctx: CallContext,
) -> Result<SpeechTrack, CorrectionError> {
    let mut provenance: Vec<Option<usize>> = (0..track.frame_count()).map(Some).collect();
    refine_tracked(track, mask, target, editor, ctx, &mut provenance, &mut Vec::new())
}

/// Runs the correction loop on one sample. The target text is never
/// modified; each iteration re-evaluates the current track against it.
pub fn correct<V: Evaluator + ?Sized, E: Editor + ?Sized>(
    track: &SpeechTrack,
    target: &TextSequence,
    evaluator: &V,
    editor: &E,
    config: &CorrectionConfig,
    sample_id: u64,
) -> Result<CorrectionOutcome, CorrectionError> {
    config.validate()?;
    let cost = CostSpec::default();
    let mut cur = track.clone();
    let mut provenance: Vec<Option<usize>> = (0..track.frame_count()).map(Some).collect();
    let mut touched: Vec<Range<usize>> = Vec::new();
    let mut per_iteration = Vec::new();
    let mut iterations_used = 0u32;
    let mut corrected = false;
    let mut failure = None;

    for iteration in 0..=config.max_iter {
        let ctx = CallContext {
            sample_id,
            iteration,
            part: 0,
        };
        let report = match evaluator.evaluate(&cur, target, ctx) {
            Ok(r) => r,
            Err(source) => {
                failure = Some(CorrectionError::EvaluatorFailure { iteration, source }.to_string());
                break;
            }
        };
        let alignment = dtw_align(target, &report.transcript, &cost);
        let o = alignment.discrepancies;
        let wer = word_error_rate(target, &report.transcript, o.len());
        let passed =
            gate(wer, report.quality, config) && o.is_empty() && report.scope.is_empty();
        per_iteration.push(Snapshot {
            iteration,
            wer,
            quality: report.quality.value(),
            error_scope: report.scope.clone(),
            discrepancies: o.len(),
            passed,
        });
        if passed {
            corrected = true;
            break;
        }
        if iteration == config.max_iter {
            break;
        }
        let mut mask = build_mask(&report.scope, &o, target, &cur, config.margin_policy);
        if mask.is_empty() {
            // the gate failed on quality or WER alone with nothing localized
            mask = full_interval(&cur).map(TimeScope::single).unwrap_or_default();
        }
        match refine_tracked(&cur, &mask, target, editor, ctx, &mut provenance, &mut touched) {
            Ok(next) => cur = next,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
        iterations_used += 1;
    }

    let cumulative_mask = track.scope_of_frames(touched);
    Ok(CorrectionOutcome {
        final_track: cur,
        iterations_used,
        per_iteration,
        corrected,
        cumulative_mask,
        provenance,
        failure,
    })
}
