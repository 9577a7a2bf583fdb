//! Half-open time intervals and normalized sets of them.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("invalid interval [{start}, {end}): start must be finite and strictly before end")]
pub struct InvalidInterval {
    pub start: f64,
    pub end: f64,
}

/// A half-open interval `[start_s, end_s)` in seconds.
///
/// Negative starts are representable so that raw, unclamped scopes (for
/// instance a mask extended past the beginning of a track) can be built and
/// then passed through [`TimeScope::clamp`].
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "(f64, f64)", into = "(f64, f64)")]
pub struct TimeInterval {
    start_s: f64,
    end_s: f64,
}

impl TimeInterval {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self, InvalidInterval> {
        if start_s.is_finite() && end_s.is_finite() && start_s < end_s {
            Ok(Self { start_s, end_s })
        } else {
            Err(InvalidInterval {
                start: start_s,
                end: end_s,
            })
        }
    }

    /// Like [`TimeInterval::new`] but returns `None` for empty or invalid bounds.
    pub fn checked(start_s: f64, end_s: f64) -> Option<Self> {
        Self::new(start_s, end_s).ok()
    }

    #[inline]
    pub fn start(&self) -> f64 {
        self.start_s
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.end_s
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.end_s - self.start_s
    }

    #[inline]
    pub fn contains(&self, t: f64) -> bool {
        self.start_s <= t && t < self.end_s
    }

    pub fn overlaps(&self, other: &TimeInterval) -> bool {
        self.start_s < other.end_s && other.start_s < self.end_s
    }

    pub fn intersection_length(&self, other: &TimeInterval) -> f64 {
        let lo = self.start_s.max(other.start_s);
        let hi = self.end_s.min(other.end_s);
        (hi - lo).max(0.0)
    }

    pub fn is_subset_of(&self, lo: f64, hi: f64) -> bool {
        lo <= self.start_s && self.end_s <= hi
    }
}

impl fmt::Debug for TimeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start_s, self.end_s)
    }
}

impl TryFrom<(f64, f64)> for TimeInterval {
    type Error = InvalidInterval;

    fn try_from((start, end): (f64, f64)) -> Result<Self, Self::Error> {
        Self::new(start, end)
    }
}

impl From<TimeInterval> for (f64, f64) {
    fn from(iv: TimeInterval) -> Self {
        (iv.start_s, iv.end_s)
    }
}

/// A set of time points stored as sorted, pairwise disjoint, non-adjacent
/// intervals. Every constructor normalizes, so the invariant always holds.
#[derive(Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<TimeInterval>", into = "Vec<TimeInterval>")]
pub struct TimeScope {
    intervals: Vec<TimeInterval>,
}

impl TimeScope {
    pub const fn empty() -> Self {
        Self {
            intervals: Vec::new(),
        }
    }

    pub fn single(interval: TimeInterval) -> Self {
        Self {
            intervals: alloc::vec![interval],
        }
    }

    /// Builds a scope from arbitrary intervals, merging overlapping and
    /// touching ones.
    pub fn from_intervals<I: IntoIterator<Item = TimeInterval>>(intervals: I) -> Self {
        let mut raw: Vec<TimeInterval> = intervals.into_iter().collect();
        raw.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
        let mut merged: Vec<TimeInterval> = Vec::with_capacity(raw.len());
        for iv in raw {
            match merged.last_mut() {
                Some(last) if iv.start_s <= last.end_s => {
                    if iv.end_s > last.end_s {
                        last.end_s = iv.end_s;
                    }
                }
                _ => merged.push(iv),
            }
        }
        Self { intervals: merged }
    }

    /// Convenience constructor from `(start, end)` pairs; pairs that do not
    /// form a valid interval are skipped.
    pub fn from_pairs<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> Self {
        Self::from_intervals(
            pairs
                .into_iter()
                .filter_map(|(s, e)| TimeInterval::checked(s, e)),
        )
    }

    pub fn intervals(&self) -> &[TimeInterval] {
        &self.intervals
    }

    pub fn iter(&self) -> core::slice::Iter<'_, TimeInterval> {
        self.intervals.iter()
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(TimeInterval::length).sum()
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|iv| iv.contains(t))
    }

    pub fn union(&self, other: &TimeScope) -> TimeScope {
        Self::from_intervals(self.intervals.iter().chain(other.intervals.iter()).copied())
    }

    /// Measure of the points covered by both scopes.
    pub fn intersection_length(&self, other: &TimeScope) -> f64 {
        let (a, b) = (&self.intervals, &other.intervals);
        let (mut i, mut j) = (0, 0);
        let mut total = 0.0;
        while i < a.len() && j < b.len() {
            total += a[i].intersection_length(&b[j]);
            if a[i].end_s < b[j].end_s {
                i += 1;
            } else {
                j += 1;
            }
        }
        total
    }

    /// Clips every interval to `[0, duration]`, dropping those that vanish.
    pub fn clamp(&self, duration: f64) -> TimeScope {
        let intervals = self
            .intervals
            .iter()
            .filter_map(|iv| TimeInterval::checked(iv.start_s.max(0.0), iv.end_s.min(duration)))
            .collect();
        // clipping preserves order and disjointness
        Self { intervals }
    }

    /// Grows every interval by `margin(interval)` on both sides and
    /// re-normalizes.
    pub fn extend_each<F: FnMut(&TimeInterval) -> f64>(&self, mut margin: F) -> TimeScope {
        Self::from_intervals(self.intervals.iter().filter_map(|iv| {
            let m = margin(iv).max(0.0);
            TimeInterval::checked(iv.start_s - m, iv.end_s + m)
        }))
    }
}

impl fmt::Debug for TimeScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.intervals.iter()).finish()
    }
}

impl From<Vec<TimeInterval>> for TimeScope {
    fn from(v: Vec<TimeInterval>) -> Self {
        Self::from_intervals(v)
    }
}

impl From<TimeScope> for Vec<TimeInterval> {
    fn from(s: TimeScope) -> Self {
        s.intervals
    }
}

impl FromIterator<TimeInterval> for TimeScope {
    fn from_iter<I: IntoIterator<Item = TimeInterval>>(iter: I) -> Self {
        Self::from_intervals(iter)
    }
}

impl<'a> IntoIterator for &'a TimeScope {
    type Item = &'a TimeInterval;
    type IntoIter = core::slice::Iter<'a, TimeInterval>;

    fn into_iter(self) -> Self::IntoIter {
        self.intervals.iter()
    }
}

/// `a ∪ b`.
pub fn scope_union(a: &TimeScope, b: &TimeScope) -> TimeScope {
    a.union(b)
}

/// Total measure of `a ∩ b`.
pub fn scope_intersection_length(a: &TimeScope, b: &TimeScope) -> f64 {
    a.intersection_length(b)
}

pub fn clamp_scope(s: &TimeScope, duration: f64) -> TimeScope {
    s.clamp(duration)
}
