//! Seeded stand-ins for the neural backends: a synthesizer that injects one
//! of four issue categories, an evaluator that reports (optionally noisy)
//! ground truth, an editor that regenerates masked spans, and a residual
//! provider for the preference objective.
//!
//! Ground truth is always recoverable from a track and its target text, see
//! [`track_truth`]. A frame is erroneous when it
//!
//! * carries any corruption,
//! * lies outside every word segment (a pause), or
//! * belongs to a segment that repeats an earlier word or whose labels
//!   differ from the target word (a substitution or deletion).

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{
    correct, AdapterError, CallContext, CorrectionConfig, CorrectionError, Editor,
    EvaluationReport, Evaluator,
};
use crate::preference::{ProviderError, ResidualProvider, Residuals};
use crate::rng::{domain, key_of, stream, StreamRng};
use crate::scope::TimeScope;
use crate::text::{TextSequence, WordToken};
use crate::track::{Frame, QualityScore, SpeechTrack, TrackError, UnitLabel};

/// Words used for substitutions and transcript noise.
const CONFUSIONS: [&str; 12] = [
    "the", "a", "of", "and", "to", "in", "is", "it", "that", "was", "for", "on",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueType {
    Common,
    Repeated,
    Punctuation,
    Abnormal,
    Clean,
}

impl IssueType {
    pub const ALL: [IssueType; 5] = [
        IssueType::Common,
        IssueType::Repeated,
        IssueType::Punctuation,
        IssueType::Abnormal,
        IssueType::Clean,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IssueType::Common => "common",
            IssueType::Repeated => "repeated",
            IssueType::Punctuation => "punctuation",
            IssueType::Abnormal => "abnormal",
            IssueType::Clean => "clean",
        }
    }

    /// Fewest target words the injection needs.
    pub fn min_words(self) -> usize {
        match self {
            IssueType::Common | IssueType::Repeated => 3,
            IssueType::Punctuation => 2,
            IssueType::Abnormal | IssueType::Clean => 1,
        }
    }
}

impl core::fmt::Display for IssueType {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub p_common: f64,
    pub p_repeated: f64,
    pub p_punctuation: f64,
    pub p_abnormal: f64,
    pub words_per_second: f64,
    pub hop_s: f64,
    pub evaluator_scope_jitter_s: f64,
    pub evaluator_transcript_noise: f64,
    pub editor_p_fix: f64,
    pub pause_min_s: f64,
    pub pause_max_s: f64,
    pub abnormal_min_frac: f64,
    pub abnormal_max_frac: f64,
    pub quality_corruption_weight: f64,
    pub quality_duration_weight: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            p_common: 0.3,
            p_repeated: 0.1,
            p_punctuation: 0.1,
            p_abnormal: 0.1,
            words_per_second: 2.5,
            hop_s: crate::DEFAULT_HOP_S,
            evaluator_scope_jitter_s: 0.0,
            evaluator_transcript_noise: 0.0,
            editor_p_fix: 0.8,
            pause_min_s: 0.5,
            pause_max_s: 1.5,
            abnormal_min_frac: 0.1,
            abnormal_max_frac: 0.3,
            quality_corruption_weight: 0.5,
            quality_duration_weight: 0.5,
        }
    }
}

fn is_prob(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [self.p_common, self.p_repeated, self.p_punctuation, self.p_abnormal];
        if !probs.iter().all(|p| is_prob(*p)) {
            return Err(SimError::InvalidConfig("issue probabilities must lie in [0, 1]"));
        }
        if probs.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(SimError::InvalidConfig("issue probabilities must sum to at most 1"));
        }
        if !(self.words_per_second.is_finite() && self.words_per_second > 0.0) {
            return Err(SimError::InvalidConfig("words_per_second must be positive"));
        }
        if !(self.hop_s.is_finite() && self.hop_s > 0.0) {
            return Err(SimError::InvalidConfig("hop_s must be positive"));
        }
        if !(self.evaluator_scope_jitter_s.is_finite() && self.evaluator_scope_jitter_s >= 0.0) {
            return Err(SimError::InvalidConfig("evaluator_scope_jitter_s must be nonnegative"));
        }
        if !is_prob(self.evaluator_transcript_noise) || !is_prob(self.editor_p_fix) {
            return Err(SimError::InvalidConfig("noise and p_fix must lie in [0, 1]"));
        }
        if !(self.pause_min_s > 0.0 && self.pause_min_s <= self.pause_max_s && self.pause_max_s.is_finite()) {
            return Err(SimError::InvalidConfig("pause range must satisfy 0 < min <= max"));
        }
        if !(self.abnormal_min_frac > 0.0
            && self.abnormal_min_frac <= self.abnormal_max_frac
            && self.abnormal_max_frac <= 1.0)
        {
            return Err(SimError::InvalidConfig("abnormal span fractions must satisfy 0 < min <= max <= 1"));
        }
        let (wc, wd) = (self.quality_corruption_weight, self.quality_duration_weight);
        if !(wc.is_finite() && wd.is_finite() && wc >= 0.0 && wd >= 0.0) {
            return Err(SimError::InvalidConfig("quality weights must be nonnegative"));
        }
        Ok(())
    }

    /// Frames per generated word, at least one.
    pub fn frames_per_word(&self) -> usize {
        let f = libm::round(1.0 / (self.words_per_second * self.hop_s));
        if f < 1.0 {
            1
        } else {
            f as usize
        }
    }

    fn draw_issue(&self, u: f64) -> IssueType {
        let cuts = [
            (self.p_common, IssueType::Common),
            (self.p_repeated, IssueType::Repeated),
            (self.p_punctuation, IssueType::Punctuation),
            (self.p_abnormal, IssueType::Abnormal),
        ];
        let mut acc = 0.0;
        for (p, issue) in cuts {
            acc += p;
            if u < acc {
                return issue;
            }
        }
        IssueType::Clean
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(&'static str),
    #[error("{issue} injection needs at least {needed} words, target has {got}")]
    TargetTooShort {
        issue: IssueType,
        needed: usize,
        got: usize,
    },
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
}

/// What was injected into a generated track, with its exact ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub issue_type: IssueType,
    pub truth_scope: TimeScope,
    pub truth_transcript: TextSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub scope: TimeScope,
    pub transcript: TextSequence,
    pub erroneous_frames: usize,
}

fn majority_label(frames: &[Frame]) -> Option<&UnitLabel> {
    let mut tally: Vec<(&UnitLabel, usize)> = Vec::new();
    for f in frames {
        match tally.iter_mut().find(|(u, _)| **u == f.unit) {
            Some((_, c)) => *c += 1,
            None => tally.push((&f.unit, 1)),
        }
    }
    let mut best: Option<(&UnitLabel, usize)> = None;
    for (u, c) in tally {
        if best.map_or(true, |(_, b)| c > b) {
            best = Some((u, c));
        }
    }
    best.map(|(u, _)| u)
}

/// Recovers the erroneous scope and the spoken transcript of a track.
pub fn track_truth(track: &SpeechTrack, target: &TextSequence) -> Truth {
    let words = target.word_vec();
    let frames = track.frames();
    let mut bad: Vec<bool> = frames.iter().map(|f| f.corruption > 0.0).collect();
    let mut covered = vec![false; frames.len()];
    let mut seen = vec![false; words.len()];

    // punctuation keyed by the number of target words preceding it
    let mut punct: Vec<(usize, &WordToken)> = Vec::new();
    let mut before = 0;
    for tok in target.tokens() {
        if tok.is_punctuation() {
            punct.push((before, tok));
        } else {
            before += 1;
        }
    }
    let mut spoken: Vec<WordToken> = Vec::new();
    let mut next_punct = 0;

    for seg in track.word_segments() {
        let r = track.segment_frames(seg);
        let expected = words.get(seg.word_index).copied();
        let repeat = match seen.get_mut(seg.word_index) {
            Some(s) => core::mem::replace(s, true),
            None => false,
        };
        let mismatch = expected.is_none()
            || frames[r.clone()].iter().any(|f| f.unit.word() != expected);
        for k in r.clone() {
            covered[k] = true;
            if repeat || mismatch {
                bad[k] = true;
            }
        }

        while next_punct < punct.len() && punct[next_punct].0 <= seg.word_index {
            spoken.push(punct[next_punct].1.clone());
            next_punct += 1;
        }
        if let Some(w) = majority_label(&frames[r]).and_then(UnitLabel::word) {
            spoken.extend(WordToken::word(w));
        }
    }
    spoken.extend(punct[next_punct..].iter().map(|(_, t)| (*t).clone()));

    for (b, c) in bad.iter_mut().zip(&covered) {
        *b |= !c;
    }
    let erroneous_frames = bad.iter().filter(|b| **b).count();
    Truth {
        scope: track.scope_of_frames(runs_of(&bad)),
        transcript: TextSequence::new(spoken),
        erroneous_frames,
    }
}

fn runs_of(flags: &[bool]) -> Vec<Range<usize>> {
    let mut runs = Vec::new();
    let mut start = None;
    for (k, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                runs.push(s..k);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push(s..flags.len());
    }
    runs
}

/// `10 - 9 * (wc * mean corruption + wd * erroneous fraction)`, clamped.
pub fn quality_of(track: &SpeechTrack, erroneous_s: f64, config: &SimConfig) -> QualityScore {
    let frac = if track.duration() > 0.0 {
        (erroneous_s / track.duration()).min(1.0)
    } else {
        0.0
    };
    let badness = config.quality_corruption_weight * track.mean_corruption()
        + config.quality_duration_weight * frac;
    QualityScore::clamped(10.0 - 9.0 * badness)
}

/// Editable frame/segment representation.
#[derive(Debug, Clone)]
struct Draft {
    frames: Vec<Frame>,
    segs: Vec<(usize, Range<usize>)>,
}

impl Draft {
    fn clean(words: &[&str], per_word: usize) -> Self {
        let mut d = Draft {
            frames: Vec::with_capacity(words.len() * per_word),
            segs: Vec::with_capacity(words.len()),
        };
        for (k, w) in words.iter().enumerate() {
            let start = d.frames.len();
            d.frames.extend((0..per_word).map(|_| Frame::word(w)));
            d.segs.push((k, start..start + per_word));
        }
        d
    }

    fn from_track(track: &SpeechTrack) -> Self {
        Draft {
            frames: track.frames().to_vec(),
            segs: track
                .word_segments()
                .iter()
                .map(|s| (s.word_index, track.segment_frames(s)))
                .collect(),
        }
    }

    fn build(self, hop_s: f64) -> Result<SpeechTrack, TrackError> {
        SpeechTrack::from_frame_segments(self.frames, hop_s, &self.segs)
    }

    /// Inserts frames at `pos`; segments starting at or after it shift.
    fn insert(&mut self, pos: usize, new: Vec<Frame>) {
        let d = new.len();
        self.frames.splice(pos..pos, new);
        for (_, r) in &mut self.segs {
            if r.start >= pos {
                *r = r.start + d..r.end + d;
            } else if r.end > pos {
                r.end += d;
            }
        }
    }

    /// Segments lying entirely inside `region`.
    fn inner_segments(&self, region: &Range<usize>) -> Vec<usize> {
        self.segs
            .iter()
            .enumerate()
            .filter(|(_, (_, r))| r.start >= region.start && r.end <= region.end)
            .map(|(i, _)| i)
            .collect()
    }

    /// Replaces `[fa, fb)` with clean speech of the target words that belong
    /// there, continuing partially covered segments with their own word.
    /// Returns the range of the regenerated frames.
    fn rebuild(&mut self, run: Range<usize>, words: &[&str], per_word: usize) -> Range<usize> {
        let (fa, fb) = (run.start, run.end);
        let word_frame = |idx: usize| {
            words
                .get(idx)
                .map_or_else(Frame::silence, |w| Frame::word(w))
        };
        let left = self.segs.iter().position(|(_, r)| r.start < fa && fa < r.end);
        let right = self.segs.iter().position(|(_, r)| r.start < fb && fb < r.end);

        if let (Some(l), Some(r)) = (left, right) {
            if l == r {
                let f = word_frame(self.segs[l].0);
                for k in fa..fb {
                    self.frames[k] = f.clone();
                }
                return run;
            }
        }

        let lw = match left {
            Some(l) => Some(self.segs[l].0),
            None => self.segs.iter().rev().find(|(_, r)| r.end <= fa).map(|s| s.0),
        };
        let rw = match right {
            Some(r) => self.segs[r].0,
            None => self
                .segs
                .iter()
                .find(|(_, r)| r.start >= fb)
                .map_or(words.len(), |s| s.0),
        };
        let mid_words = lw.map_or(0, |w| w + 1)..rw.max(lw.map_or(0, |w| w + 1));

        let mut fresh: Vec<Frame> = Vec::new();
        if let Some(l) = left {
            let (w, ref r) = self.segs[l];
            fresh.extend((0..r.end - fa).map(|_| word_frame(w)));
        }
        let mut new_segs: Vec<(usize, Range<usize>)> = Vec::new();
        for w in mid_words {
            let s = fa + fresh.len();
            fresh.extend((0..per_word).map(|_| word_frame(w)));
            new_segs.push((w, s..s + per_word));
        }
        let head = right.map(|r| fb - self.segs[r].1.start);
        let right_start = fa + fresh.len();
        if let (Some(r), Some(h)) = (right, head) {
            let w = self.segs[r].0;
            fresh.extend((0..h).map(|_| word_frame(w)));
        }

        let new_len = fresh.len();
        let delta = new_len as isize - (fb - fa) as isize;
        let shift = |x: usize| (x as isize + delta) as usize;
        self.frames.splice(fa..fb, fresh);

        let mut segs = Vec::with_capacity(self.segs.len() + new_segs.len());
        for (i, (w, r)) in self.segs.iter().enumerate() {
            if Some(i) == right {
                segs.push((*w, right_start..shift(r.end)));
            } else if r.end <= fa || Some(i) == left {
                segs.push((*w, r.clone()));
            } else if r.start >= fb {
                segs.push((*w, shift(r.start)..shift(r.end)));
            }
            // segments inside the run are dropped
        }
        segs.extend(new_segs);
        segs.sort_by_key(|(_, r)| r.start);
        self.segs = segs;
        fa..fa + new_len
    }
}

fn confusion_for(rng: &mut StreamRng, word: &str) -> &'static str {
    loop {
        let c = CONFUSIONS[rng.random_range(0..CONFUSIONS.len())];
        if c != word {
            return c;
        }
    }
}

fn frames_for_seconds(s: f64, hop: f64) -> usize {
    let f = libm::round(s / hop);
    if f < 1.0 {
        1
    } else {
        f as usize
    }
}

fn inject_common(d: &mut Draft, seg: usize, words: &[&str], rng: &mut StreamRng) {
    let (w, r) = d.segs[seg].clone();
    let frame = if rng.random_bool(0.5) {
        let expected = words.get(w).copied().unwrap_or("");
        Frame::word(confusion_for(rng, expected))
    } else {
        Frame::silence()
    };
    for k in r {
        d.frames[k] = frame.clone();
    }
}

fn inject_repeated(d: &mut Draft, seg: usize) {
    let (w, r) = d.segs[seg].clone();
    let copy = d.frames[r.clone()].to_vec();
    let len = copy.len();
    d.insert(r.end, copy);
    d.segs.push((w, r.end..r.end + len));
    d.segs.sort_by_key(|(_, r)| r.start);
}

fn inject_pause(d: &mut Draft, pos: usize, config: &SimConfig, rng: &mut StreamRng) {
    let secs = rng.random_range(config.pause_min_s..=config.pause_max_s);
    let n = frames_for_seconds(secs, config.hop_s);
    d.insert(pos, vec![Frame::silence(); n]);
}

fn inject_abnormal(d: &mut Draft, region: Range<usize>, config: &SimConfig, rng: &mut StreamRng) {
    let avail = region.len();
    let frac = rng.random_range(config.abnormal_min_frac..=config.abnormal_max_frac);
    let len = (libm::round(frac * avail as f64) as usize).clamp(1, avail);
    let start = region.start + rng.random_range(0..=avail - len);
    for f in &mut d.frames[start..start + len] {
        f.corruption = rng.random_range(0.8..=1.0);
    }
}

/// Injects `issue` somewhere in `region`, falling back to a corrupted span
/// (or, for an empty region, a pause) when the region cannot host it.
fn inject(
    d: &mut Draft,
    issue: IssueType,
    region: Range<usize>,
    words: &[&str],
    config: &SimConfig,
    rng: &mut StreamRng,
) {
    let inner = d.inner_segments(&region);
    match issue {
        IssueType::Clean => {}
        IssueType::Common if !inner.is_empty() => {
            let seg = inner[rng.random_range(0..inner.len())];
            inject_common(d, seg, words, rng);
        }
        IssueType::Repeated if !inner.is_empty() => {
            let seg = inner[rng.random_range(0..inner.len())];
            inject_repeated(d, seg);
        }
        IssueType::Punctuation => {
            let total = d.frames.len();
            let mut spots: Vec<usize> = d
                .segs
                .iter()
                .flat_map(|(_, r)| [r.start, r.end])
                .filter(|p| (region.start..=region.end).contains(p) && *p > 0 && *p < total)
                .collect();
            spots.dedup();
            let pos = if spots.is_empty() {
                region.start
            } else {
                spots[rng.random_range(0..spots.len())]
            };
            inject_pause(d, pos, config, rng);
        }
        _ if !region.is_empty() => inject_abnormal(d, region, config, rng),
        _ => inject_pause(d, region.start, config, rng),
    }
}

/// Clean synthesis of the target at the configured pacing.
pub fn clean_track(target: &TextSequence, config: &SimConfig) -> Result<SpeechTrack, SimError> {
    config.validate()?;
    let words = target.word_vec();
    Ok(Draft::clean(&words, config.frames_per_word()).build(config.hop_s)?)
}

/// Synthesizes `target` for sample `sample_id`, injecting at most one issue
/// drawn from the configured categorical distribution.
pub fn simulate_tts(
    target: &TextSequence,
    config: &SimConfig,
    sample_id: u64,
) -> Result<(SpeechTrack, InjectionRecord), SimError> {
    config.validate()?;
    let words = target.word_vec();
    let mut rng = stream(config.seed, &[domain::TTS, sample_id]);
    let issue = config.draw_issue(rng.random::<f64>());
    if words.len() < issue.min_words() || words.is_empty() {
        return Err(SimError::TargetTooShort {
            issue,
            needed: issue.min_words(),
            got: words.len(),
        });
    }
    let mut d = Draft::clean(&words, config.frames_per_word());
    match issue {
        IssueType::Punctuation => {
            // between two words, never at the edges
            let k = rng.random_range(0..words.len() - 1);
            let pos = d.segs[k].1.end;
            inject_pause(&mut d, pos, config, &mut rng);
        }
        _ => {
            let all = 0..d.frames.len();
            inject(&mut d, issue, all, &words, config, &mut rng);
        }
    }
    let track = d.build(config.hop_s)?;
    let truth = track_truth(&track, target);
    let record = InjectionRecord {
        issue_type: issue,
        truth_scope: truth.scope,
        truth_transcript: truth.transcript,
    };
    Ok((track, record))
}

fn noisy_report(
    track: &SpeechTrack,
    scope: &TimeScope,
    transcript: &TextSequence,
    config: &SimConfig,
    rng: &mut StreamRng,
) -> EvaluationReport {
    let quality = quality_of(track, scope.total_length(), config);
    let transcript = if config.evaluator_transcript_noise > 0.0 {
        TextSequence::new(
            transcript
                .tokens()
                .iter()
                .map(|t| {
                    if !t.is_punctuation() && rng.random_bool(config.evaluator_transcript_noise) {
                        WordToken::word(confusion_for(rng, t.text())).unwrap_or_else(|| t.clone())
                    } else {
                        t.clone()
                    }
                })
                .collect(),
        )
    } else {
        transcript.clone()
    };
    let j = config.evaluator_scope_jitter_s;
    let scope = if j > 0.0 {
        TimeScope::from_pairs(scope.iter().map(|iv| {
            (
                iv.start() + rng.random_range(-j..=j),
                iv.end() + rng.random_range(-j..=j),
            )
        }))
        .clamp(track.duration())
    } else {
        scope.clone()
    };
    EvaluationReport {
        transcript,
        scope,
        quality,
    }
}

/// Evaluator output for a freshly generated track, derived from its
/// injection record.
pub fn simulate_evaluator(
    track: &SpeechTrack,
    injection: &InjectionRecord,
    config: &SimConfig,
    ctx: CallContext,
) -> EvaluationReport {
    let mut rng = stream(
        config.seed,
        &[domain::EVALUATOR, ctx.sample_id, u64::from(ctx.iteration)],
    );
    noisy_report(
        track,
        &injection.truth_scope,
        &injection.truth_transcript,
        config,
        &mut rng,
    )
}

/// Evaluator adapter that reads the truth off each track it is given.
#[derive(Debug, Clone, Copy)]
pub struct SimEvaluator {
    pub config: SimConfig,
}

impl Evaluator for SimEvaluator {
    fn evaluate(
        &self,
        track: &SpeechTrack,
        target: &TextSequence,
        ctx: CallContext,
    ) -> Result<EvaluationReport, AdapterError> {
        let truth = track_truth(track, target);
        let mut rng = stream(
            self.config.seed,
            &[domain::EVALUATOR, ctx.sample_id, u64::from(ctx.iteration)],
        );
        Ok(noisy_report(
            track,
            &truth.scope,
            &truth.transcript,
            &self.config,
            &mut rng,
        ))
    }
}

/// Regenerates the masked spans. One success draw per (sample, iteration)
/// decides whether the spans come back clean or with a fresh issue.
pub fn simulate_editor(
    track: &SpeechTrack,
    mask: &TimeScope,
    target: &TextSequence,
    config: &SimConfig,
    ctx: CallContext,
) -> Result<SpeechTrack, SimError> {
    config.validate()?;
    let runs = track.frame_runs(mask);
    if runs.is_empty() {
        return Ok(track.clone());
    }
    let iteration = u64::from(ctx.iteration);
    let fixed = stream(config.seed, &[domain::EDITOR, ctx.sample_id, iteration])
        .random_bool(config.editor_p_fix);
    let words = target.word_vec();
    let mut d = Draft::from_track(track);
    for run in runs.into_iter().rev() {
        let start = run.start as u64;
        let region = d.rebuild(run, &words, config.frames_per_word());
        if !fixed {
            let mut rng = stream(
                config.seed,
                &[domain::EDITOR_PART, ctx.sample_id, iteration, start],
            );
            let issue = config.draw_issue(rng.random::<f64>() * config.total_issue_mass());
            let issue = if issue == IssueType::Clean {
                IssueType::Abnormal
            } else {
                issue
            };
            inject(&mut d, issue, region, &words, config, &mut rng);
        }
    }
    Ok(d.build(track.hop_s())?)
}

impl SimConfig {
    fn total_issue_mass(&self) -> f64 {
        self.p_common + self.p_repeated + self.p_punctuation + self.p_abnormal
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimEditor {
    pub config: SimConfig,
}

impl Editor for SimEditor {
    fn edit(
        &self,
        track: &SpeechTrack,
        mask: &TimeScope,
        target: &TextSequence,
        ctx: CallContext,
    ) -> Result<SpeechTrack, AdapterError> {
        simulate_editor(track, mask, target, &self.config, ctx)
            .map_err(|e| AdapterError(e.to_string()))
    }
}

/// Gaussian draw by the Box-Muller transform.
fn normal(rng: &mut StreamRng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Seeded residuals: standard normal noise, with policy and reference
/// predictions scattered around it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimResidualProvider {
    pub seed: u64,
    pub len: usize,
    pub policy_spread: f64,
    pub reference_spread: f64,
}

impl SimResidualProvider {
    pub fn new(seed: u64, len: usize) -> Self {
        Self {
            seed,
            len,
            policy_spread: 0.5,
            reference_spread: 0.5,
        }
    }
}

impl ResidualProvider for SimResidualProvider {
    fn residuals(&self, sample_id: &str, timestep: u32) -> Result<Residuals, ProviderError> {
        let mut rng = stream(
            self.seed,
            &[domain::RESIDUALS, key_of(sample_id), u64::from(timestep)],
        );
        let eps: Vec<f64> = (0..self.len).map(|_| normal(&mut rng)).collect();
        let pred_theta = eps
            .iter()
            .map(|e| e + self.policy_spread * normal(&mut rng))
            .collect();
        let pred_ref = eps
            .iter()
            .map(|e| e + self.reference_spread * normal(&mut rng))
            .collect();
        Ok(Residuals {
            eps,
            pred_theta,
            pred_ref,
        })
    }
}

/// Result of correcting one simulated sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRun {
    pub sample_id: u64,
    pub issue_type: IssueType,
    /// Gate result after 0, 1, ..., max_iter iterations. A run that stopped
    /// early keeps its last state.
    pub passed: Vec<bool>,
    pub iterations_used: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedSample {
    pub sample_id: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub n_requested: usize,
    pub n_included: usize,
    pub excluded: Vec<ExcludedSample>,
    pub initially_failing: usize,
    /// Failing sample counts after 0, 1, ..., max_iter iterations.
    pub failing: Vec<usize>,
    /// `failing[k] / n_included`.
    pub curve: Vec<f64>,
    /// Failure fraction among initially failing samples only.
    pub conditional_curve: Option<Vec<f64>>,
}

/// Generates sample `sample_id` and runs the correction loop on it with the
/// simulated evaluator and editor.
pub fn run_sample(
    sample_id: u64,
    target: &TextSequence,
    config: &SimConfig,
    correction: &CorrectionConfig,
) -> Result<SampleRun, SimError> {
    let (track, injection) = simulate_tts(target, config, sample_id)?;
    let outcome = correct(
        &track,
        target,
        &SimEvaluator { config: *config },
        &SimEditor { config: *config },
        correction,
        sample_id,
    )?;
    if let Some(msg) = outcome.failure {
        return Err(SimError::Correction(CorrectionError::EditorFailure {
            iteration: outcome.iterations_used,
            part: 0,
            reason: msg,
        }));
    }
    let mut passed: Vec<bool> = outcome.per_iteration.iter().map(|s| s.passed).collect();
    let last = passed.last().copied().unwrap_or(false);
    passed.resize(correction.max_iter as usize + 1, last);
    Ok(SampleRun {
        sample_id,
        issue_type: injection.issue_type,
        passed,
        iterations_used: outcome.iterations_used,
    })
}

/// Folds per-sample results into a failure-rate curve.
pub fn aggregate(
    results: &[Result<SampleRun, ExcludedSample>],
    max_iter: u32,
) -> ExperimentReport {
    let points = max_iter as usize + 1;
    let mut failing = vec![0usize; points];
    let mut cond = vec![0usize; points];
    let mut excluded = Vec::new();
    let mut included = 0;
    let mut initially_failing = 0;
    for r in results {
        match r {
            Ok(run) => {
                included += 1;
                let init_fail = !run.passed[0];
                initially_failing += usize::from(init_fail);
                for (k, p) in run.passed.iter().enumerate().take(points) {
                    if !p {
                        failing[k] += 1;
                        cond[k] += usize::from(init_fail);
                    }
                }
            }
            Err(e) => excluded.push(e.clone()),
        }
    }
    let frac = |c: &usize, d: usize| if d == 0 { 0.0 } else { *c as f64 / d as f64 };
    ExperimentReport {
        n_requested: results.len(),
        n_included: included,
        excluded,
        initially_failing,
        curve: failing.iter().map(|c| frac(c, included)).collect(),
        conditional_curve: (initially_failing > 0)
            .then(|| cond.iter().map(|c| frac(c, initially_failing)).collect()),
        failing,
    }
}

/// Target text used for sample `i`: the corpus is cycled.
pub fn target_for(targets: &[TextSequence], i: usize) -> Option<&TextSequence> {
    if targets.is_empty() {
        None
    } else {
        Some(&targets[i % targets.len()])
    }
}

/// Generates and corrects `n_samples` samples sequentially.
pub fn run_experiment(
    n_samples: usize,
    targets: &[TextSequence],
    config: &SimConfig,
    correction: &CorrectionConfig,
) -> Result<ExperimentReport, SimError> {
    config.validate()?;
    correction.validate()?;
    if n_samples == 0 {
        return Err(SimError::InvalidConfig("n_samples must be at least 1"));
    }
    if targets.is_empty() {
        return Err(SimError::InvalidConfig("target corpus is empty"));
    }
    let results: Vec<Result<SampleRun, ExcludedSample>> = (0..n_samples)
        .map(|i| {
            let target = &targets[i % targets.len()];
            run_sample(i as u64, target, config, correction).map_err(|e| ExcludedSample {
                sample_id: i as u64,
                reason: e.to_string(),
            })
        })
        .collect();
    Ok(aggregate(&results, correction.max_iter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{scope_iou, wer};
    use crate::scope::TimeInterval;

    const SENTENCE: &str = "the quick brown fox jumps over the lazy dog today";

    fn cfg(p: [f64; 4]) -> SimConfig {
        SimConfig {
            seed: 11,
            p_common: p[0],
            p_repeated: p[1],
            p_punctuation: p[2],
            p_abnormal: p[3],
            editor_p_fix: 1.0,
            ..SimConfig::default()
        }
    }

    fn labels(track: &SpeechTrack) -> Vec<Option<&str>> {
        track.frames().iter().map(|f| f.unit.word()).collect()
    }

    #[test]
    fn clean_generation_spells_target() {
        let target = TextSequence::parse("Hello, big world.");
        let (track, rec) = simulate_tts(&target, &cfg([0.0; 4]), 3).unwrap();
        assert_eq!(rec.issue_type, IssueType::Clean);
        assert!(rec.truth_scope.is_empty());
        assert_eq!(rec.truth_transcript, target);
        assert_eq!(track.frame_count(), 3 * 20);
        assert!(track.frames().iter().all(|f| f.corruption == 0.0));
        let l = labels(&track);
        assert_eq!((l[0], l[20], l[40]), (Some("hello"), Some("big"), Some("world")));
        let q = simulate_evaluator(&track, &rec, &cfg([0.0; 4]), CallContext::default());
        assert_eq!(q.quality.value(), 10.0);
        assert_eq!(q.transcript, target);
    }

    #[test]
    fn generation_is_deterministic() {
        let target = TextSequence::parse(SENTENCE);
        let c = cfg([0.25, 0.25, 0.25, 0.25]);
        for id in 0..20 {
            assert_eq!(simulate_tts(&target, &c, id), simulate_tts(&target, &c, id));
        }
    }

    #[test]
    fn every_category_leaves_matching_truth() {
        let target = TextSequence::parse(SENTENCE);
        for (i, issue) in IssueType::ALL[..4].iter().enumerate() {
            let mut p = [0.0; 4];
            p[i] = 1.0;
            for id in 0..30 {
                let (track, rec) = simulate_tts(&target, &cfg(p), id).unwrap();
                assert_eq!(rec.issue_type, *issue);
                assert!(!rec.truth_scope.is_empty());
                let w = wer(&target, &rec.truth_transcript).unwrap();
                match issue {
                    IssueType::Common | IssueType::Repeated => assert!(w > 0.0),
                    _ => assert_eq!(w, 0.0),
                }
                let rep = simulate_evaluator(&track, &rec, &cfg(p), CallContext::default());
                assert_eq!(scope_iou(&rep.scope, &rec.truth_scope).unwrap(), 1.0);
                assert!(rep.quality.value() < 10.0);
            }
        }
    }

    #[test]
    fn deletion_scope_is_the_silenced_word() {
        let target = TextSequence::parse("one two three four five");
        let c = cfg([1.0, 0.0, 0.0, 0.0]);
        let mut seen_delete = false;
        for id in 0..40 {
            let (track, rec) = simulate_tts(&target, &c, id).unwrap();
            if rec.truth_transcript.word_count() == 4 {
                seen_delete = true;
                let iv = rec.truth_scope.intervals()[0];
                let k = track.frame_at(iv.start()) / 20;
                assert_eq!(rec.truth_scope.len(), 1);
                assert!((iv.length() - 0.4).abs() < 1e-9);
                let mut expect = target.word_vec();
                expect.remove(k);
                assert_eq!(rec.truth_transcript.word_vec(), expect);
                assert!(track.frames()[k * 20..(k + 1) * 20].iter().all(|f| f.unit == UnitLabel::Silence));
            }
        }
        assert!(seen_delete);
    }

    #[test]
    fn short_targets_rejected() {
        let c = cfg([1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            simulate_tts(&TextSequence::parse("two words"), &c, 0),
            Err(SimError::TargetTooShort { needed: 3, got: 2, .. })
        ));
        assert!(simulate_tts(&TextSequence::parse(""), &cfg([0.0; 4]), 0).is_err());
    }

    #[test]
    fn quality_formula() {
        // four words and a 20-frame pause: 20 % erroneous, no corruption
        let mut d = Draft::clean(&["a", "b", "c", "d"], 20);
        d.insert(40, vec![Frame::silence(); 20]);
        let track = d.build(0.02).unwrap();
        let truth = track_truth(&track, &TextSequence::parse("a b c d"));
        assert_eq!(truth.erroneous_frames, 20);
        let q = quality_of(&track, truth.scope.total_length(), &SimConfig::default());
        assert!((q.value() - 9.1).abs() < 1e-12);
    }

    #[test]
    fn jitter_bounds_iou() {
        let target = TextSequence::parse("a b c d e");
        let track = clean_track(&target, &SimConfig::default()).unwrap();
        let truth = TimeScope::from_pairs([(1.0, 2.0)]);
        let rec = InjectionRecord {
            issue_type: IssueType::Abnormal,
            truth_scope: truth.clone(),
            truth_transcript: target.clone(),
        };
        let c = SimConfig {
            evaluator_scope_jitter_s: 0.1,
            ..SimConfig::default()
        };
        for id in 0..200 {
            let ctx = CallContext {
                sample_id: id,
                ..CallContext::default()
            };
            let rep = simulate_evaluator(&track, &rec, &c, ctx);
            let iv = rep.scope.intervals()[0];
            assert!(iv.start() >= 0.9 - 1e-12 && iv.end() <= 2.1 + 1e-12);
            assert!(scope_iou(&rep.scope, &truth).unwrap() >= 0.8 / 1.2 - 1e-12);
        }
    }

    #[test]
    fn editor_empty_mask_is_identity() {
        let target = TextSequence::parse(SENTENCE);
        for p_fix in [0.0, 1.0] {
            let c = SimConfig {
                editor_p_fix: p_fix,
                ..cfg([0.3, 0.3, 0.2, 0.2])
            };
            let (track, _) = simulate_tts(&target, &c, 5).unwrap();
            let out = simulate_editor(&track, &TimeScope::empty(), &target, &c, CallContext::default()).unwrap();
            assert_eq!(out, track);
        }
    }

    #[test]
    fn perfect_editor_rebuilds_target() {
        let target = TextSequence::parse(SENTENCE);
        let c = cfg([0.25, 0.25, 0.25, 0.25]);
        for id in 0..40 {
            let (track, _) = simulate_tts(&target, &c, id).unwrap();
            let full = TimeScope::single(TimeInterval::new(0.0, track.duration()).unwrap());
            let out = simulate_editor(&track, &full, &target, &c, CallContext::default()).unwrap();
            assert_eq!(out, clean_track(&target, &c).unwrap());
        }
    }

    #[test]
    fn failing_editor_leaves_errors_in_region() {
        let target = TextSequence::parse(SENTENCE);
        let c = SimConfig {
            editor_p_fix: 0.0,
            ..cfg([0.25, 0.25, 0.25, 0.25])
        };
        let clean = clean_track(&target, &c).unwrap();
        for id in 0..40 {
            let mask = TimeScope::from_pairs([(0.8, 2.0)]);
            let ctx = CallContext {
                sample_id: id,
                ..CallContext::default()
            };
            let out = simulate_editor(&clean, &mask, &target, &c, ctx).unwrap();
            let truth = track_truth(&out, &target);
            assert!(!truth.scope.is_empty());
            assert_eq!(out.frames()[..40], clean.frames()[..40]);
        }
    }

    #[test]
    fn split_calls_equal_single_call() {
        let target = TextSequence::parse(SENTENCE);
        let c = SimConfig {
            editor_p_fix: 0.0,
            ..cfg([0.25, 0.25, 0.25, 0.25])
        };
        let (track, _) = simulate_tts(&target, &c, 9).unwrap();
        let mask = TimeScope::from_pairs([(0.4, 0.8), (2.0, 2.4)]);
        let ctx = CallContext {
            sample_id: 9,
            iteration: 1,
            part: 0,
        };
        let once = simulate_editor(&track, &mask, &target, &c, ctx).unwrap();
        let right = TimeScope::from_pairs([(2.0, 2.4)]);
        let step = simulate_editor(&track, &right, &target, &c, ctx).unwrap();
        let left = TimeScope::from_pairs([(0.4, 0.8)]);
        let step = simulate_editor(&step, &left, &target, &c, ctx).unwrap();
        assert_eq!(once, step);
    }

    #[test]
    fn experiment_edges() {
        let targets = [TextSequence::parse(SENTENCE)];
        let flat = run_experiment(50, &targets, &cfg([0.0; 4]), &CorrectionConfig::default()).unwrap();
        assert_eq!(flat.curve, vec![0.0, 0.0, 0.0]);
        let perfect = run_experiment(200, &targets, &cfg([0.3, 0.2, 0.2, 0.2]), &CorrectionConfig::default()).unwrap();
        assert!(perfect.curve[0] > 0.5);
        assert_eq!(&perfect.curve[1..], &[0.0, 0.0]);
        assert!(perfect.excluded.is_empty());
    }

    #[test]
    fn residuals_are_seeded() {
        let p = SimResidualProvider::new(4, 16);
        assert_eq!(p.residuals("a", 3), p.residuals("a", 3));
        assert_ne!(p.residuals("a", 3), p.residuals("b", 3));
        assert_eq!(p.residuals("a", 3).unwrap().eps.len(), 16);
    }
}
