//! Symbolic stand-in for a synthesized utterance: a frame sequence with unit
//! labels and corruption levels, plus word-level timing.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scope::{TimeInterval, TimeScope};

// Absorbs representation error when mapping times that were produced from
// frame indices back onto frame indices.
const FRAME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("hop must be positive and finite, got {0}")]
    InvalidHop(f64),
    #[error("frame {index} has corruption {value} outside [0, 1]")]
    CorruptionOutOfRange { index: usize, value: f64 },
    #[error("word segment {index} lies outside the track [0, {duration})")]
    SegmentOutOfBounds { index: usize, duration: f64 },
    #[error("word segments {index} and {next} are unsorted or overlap")]
    SegmentOrder { index: usize, next: usize },
    #[error("quality {0} outside [1, 10]")]
    QualityOutOfRange(f64),
}

/// What a frame carries.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<String>", into = "Option<String>")]
pub enum UnitLabel {
    Silence,
    Word(String),
}

impl UnitLabel {
    pub fn word(&self) -> Option<&str> {
        match self {
            UnitLabel::Word(w) => Some(w),
            UnitLabel::Silence => None,
        }
    }
}

impl From<Option<String>> for UnitLabel {
    fn from(v: Option<String>) -> Self {
        v.map_or(UnitLabel::Silence, UnitLabel::Word)
    }
}

impl From<UnitLabel> for Option<String> {
    fn from(u: UnitLabel) -> Self {
        match u {
            UnitLabel::Silence => None,
            UnitLabel::Word(w) => Some(w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub unit: UnitLabel,
    /// 0 is clean, 1 fully corrupted.
    pub corruption: f64,
}

impl Frame {
    pub fn clean(unit: UnitLabel) -> Self {
        Self {
            unit,
            corruption: 0.0,
        }
    }

    pub fn silence() -> Self {
        Self::clean(UnitLabel::Silence)
    }

    pub fn word(w: &str) -> Self {
        Self::clean(UnitLabel::Word(w.into()))
    }
}

/// Time span in which the synthesizer attempted reference word `word_index`
/// (an ordinal over the non-punctuation words of the target).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSegment", into = "RawSegment")]
pub struct WordSegment {
    pub word_index: usize,
    pub interval: TimeInterval,
}

#[derive(Serialize, Deserialize)]
struct RawSegment {
    word_index: usize,
    start_s: f64,
    end_s: f64,
}

impl TryFrom<RawSegment> for WordSegment {
    type Error = crate::scope::InvalidInterval;

    fn try_from(r: RawSegment) -> Result<Self, Self::Error> {
        TimeInterval::new(r.start_s, r.end_s).map(|iv| WordSegment::new(r.word_index, iv))
    }
}

impl From<WordSegment> for RawSegment {
    fn from(s: WordSegment) -> Self {
        RawSegment {
            word_index: s.word_index,
            start_s: s.interval.start(),
            end_s: s.interval.end(),
        }
    }
}

impl WordSegment {
    pub fn new(word_index: usize, interval: TimeInterval) -> Self {
        Self {
            word_index,
            interval,
        }
    }

    #[inline]
    pub fn interval(&self) -> TimeInterval {
        self.interval
    }
}

#[derive(Deserialize)]
struct RawTrack {
    hop_s: f64,
    frames: Vec<Frame>,
    word_segments: Vec<WordSegment>,
}

/// A validated utterance. Immutable; editing produces a new track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrack")]
pub struct SpeechTrack {
    hop_s: f64,
    frames: Vec<Frame>,
    word_segments: Vec<WordSegment>,
}

impl TryFrom<RawTrack> for SpeechTrack {
    type Error = TrackError;

    fn try_from(r: RawTrack) -> Result<Self, Self::Error> {
        SpeechTrack::new(r.frames, r.hop_s, r.word_segments)
    }
}

impl SpeechTrack {
    pub fn new(
        frames: Vec<Frame>,
        hop_s: f64,
        word_segments: Vec<WordSegment>,
    ) -> Result<Self, TrackError> {
        if !(hop_s.is_finite() && hop_s > 0.0) {
            return Err(TrackError::InvalidHop(hop_s));
        }
        for (index, f) in frames.iter().enumerate() {
            if !(0.0..=1.0).contains(&f.corruption) {
                return Err(TrackError::CorruptionOutOfRange {
                    index,
                    value: f.corruption,
                });
            }
        }
        let duration = frames.len() as f64 * hop_s;
        for (index, seg) in word_segments.iter().enumerate() {
            if !seg.interval().is_subset_of(0.0, duration + FRAME_EPS) {
                return Err(TrackError::SegmentOutOfBounds { index, duration });
            }
        }
        for (index, w) in word_segments.windows(2).enumerate() {
            if w[1].interval().start() < w[0].interval().end() - FRAME_EPS {
                return Err(TrackError::SegmentOrder {
                    index,
                    next: index + 1,
                });
            }
        }
        Ok(Self {
            hop_s,
            frames,
            word_segments,
        })
    }

    /// Builds a track whose segments are given as frame ranges.
    pub fn from_frame_segments(
        frames: Vec<Frame>,
        hop_s: f64,
        segments: &[(usize, Range<usize>)],
    ) -> Result<Self, TrackError> {
        let word_segments = segments
            .iter()
            .filter_map(|(w, r)| {
                TimeInterval::checked(r.start as f64 * hop_s, r.end as f64 * hop_s)
                    .map(|iv| WordSegment::new(*w, iv))
            })
            .collect();
        Self::new(frames, hop_s, word_segments)
    }

    pub fn hop_s(&self) -> f64 {
        self.hop_s
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn word_segments(&self) -> &[WordSegment] {
        &self.word_segments
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn duration(&self) -> f64 {
        self.frames.len() as f64 * self.hop_s
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 * self.hop_s
    }

    /// `floor(t / hop)` clamped to `[0, frame_count]`.
    pub fn frame_at(&self, t: f64) -> usize {
        let f = libm::floor(t / self.hop_s + FRAME_EPS);
        if f <= 0.0 {
            0
        } else {
            (f as usize).min(self.frames.len())
        }
    }

    /// Frames touched by the interval: from `floor(start / hop)` up to the
    /// last frame whose span begins before `end`.
    pub fn frame_span(&self, iv: &TimeInterval) -> Range<usize> {
        let lo = self.frame_at(iv.start());
        let hi = libm::ceil(iv.end() / self.hop_s - FRAME_EPS);
        let hi = if hi <= 0.0 {
            0
        } else {
            (hi as usize).min(self.frames.len())
        };
        lo..hi.max(lo)
    }

    /// Frame ranges touched by the scope, merged where they overlap or touch.
    pub fn frame_runs(&self, scope: &TimeScope) -> Vec<Range<usize>> {
        let mut runs: Vec<Range<usize>> = Vec::new();
        for iv in scope {
            let r = self.frame_span(iv);
            if r.is_empty() {
                continue;
            }
            match runs.last_mut() {
                Some(last) if r.start <= last.end => last.end = last.end.max(r.end),
                _ => runs.push(r),
            }
        }
        runs
    }

    pub fn segment_frames(&self, seg: &WordSegment) -> Range<usize> {
        self.frame_span(&seg.interval())
    }

    pub fn segments_of(&self, word_index: usize) -> impl Iterator<Item = &WordSegment> + '_ {
        self.word_segments
            .iter()
            .filter(move |s| s.word_index == word_index)
    }

    /// Mean corruption over all frames (0 for an empty track).
    pub fn mean_corruption(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        self.frames.iter().map(|f| f.corruption).sum::<f64>() / self.frames.len() as f64
    }

    /// Scope covering the given frame runs.
    pub fn scope_of_frames<I: IntoIterator<Item = Range<usize>>>(&self, runs: I) -> TimeScope {
        TimeScope::from_intervals(
            runs.into_iter()
                .filter_map(|r| TimeInterval::checked(self.time_of(r.start), self.time_of(r.end))),
        )
    }
}

/// Holistic quality on a 1–10 scale.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QualityScore(f64);

impl QualityScore {
    pub const MIN: f64 = 1.0;
    pub const MAX: f64 = 10.0;

    pub fn new(value: f64) -> Result<Self, TrackError> {
        if (Self::MIN..=Self::MAX).contains(&value) {
            Ok(Self(value))
        } else {
            Err(TrackError::QualityOutOfRange(value))
        }
    }

    pub fn clamped(value: f64) -> Self {
        if value.is_nan() {
            return Self(Self::MIN);
        }
        Self(value.clamp(Self::MIN, Self::MAX))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for QualityScore {
    type Error = TrackError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<QualityScore> for f64 {
    fn from(q: QualityScore) -> f64 {
        q.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(n: usize) -> SpeechTrack {
        let frames = (0..n).map(|_| Frame::word("a")).collect();
        SpeechTrack::from_frame_segments(frames, 0.02, &[(0, 0..n)]).unwrap()
    }

    #[test]
    fn frame_conversion_floors() {
        let t = track(100);
        assert_eq!(t.frame_at(0.2), 10);
        assert_eq!(t.frame_at(0.019), 0);
        assert_eq!(t.frame_at(-1.0), 0);
        assert_eq!(t.frame_at(10.0), 100);
        let iv = TimeInterval::new(0.2, 0.4).unwrap();
        assert_eq!(t.frame_span(&iv), 10..20);
        let partial = TimeInterval::new(0.21, 0.405).unwrap();
        assert_eq!(t.frame_span(&partial), 10..21);
        assert!((t.duration() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(matches!(
            SpeechTrack::new(vec![], 0.0, vec![]),
            Err(TrackError::InvalidHop(_))
        ));
        let bad = vec![Frame {
            unit: UnitLabel::Silence,
            corruption: 1.5,
        }];
        assert!(SpeechTrack::new(bad, 0.02, vec![]).is_err());
        let frames: Vec<Frame> = (0..10).map(|_| Frame::silence()).collect();
        assert!(SpeechTrack::from_frame_segments(frames.clone(), 0.02, &[(0, 0..11)]).is_err());
        assert!(
            SpeechTrack::from_frame_segments(frames, 0.02, &[(0, 0..6), (1, 5..8)]).is_err()
        );
    }

    #[test]
    fn quality_range() {
        assert!(QualityScore::new(0.9).is_err());
        assert!(QualityScore::new(11.0).is_err());
        assert_eq!(QualityScore::clamped(12.0).value(), 10.0);
        assert_eq!(QualityScore::new(6.0).unwrap().value(), 6.0);
    }
}
