//! Minimum-cost warping alignment between a reference word sequence and a
//! recognized one, and conversion of the resulting discrepancies to time.
//!
//! On discrete word sequences with insertion and deletion steps the warping
//! problem is a weighted edit-distance alignment. The solver fills the usual
//! `(n+1) × (m+1)` cumulative-cost table and backtracks with a fixed
//! preference order (diagonal, then deletion, then insertion) so that equal
//! cost alignments always resolve the same way.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scope::{TimeInterval, TimeScope};
use crate::text::TextSequence;
use crate::track::SpeechTrack;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlignError {
    #[error("reference word {0} has no word segment in the track")]
    UnalignedWord(usize),
    #[error("invalid cost specification: {0}")]
    InvalidCost(&'static str),
}

/// Word-to-word dissimilarity.
#[derive(Debug, Clone, Copy, Default)]
pub enum SubstitutionCost {
    /// 0 for equal words, 1 otherwise.
    Unit,
    /// Character edit distance normalized by the longer word.
    #[default]
    CharacterEdit,
    Custom(fn(&str, &str) -> f64),
}

impl SubstitutionCost {
    pub fn cost(&self, a: &str, b: &str) -> f64 {
        match self {
            SubstitutionCost::Unit => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
            SubstitutionCost::CharacterEdit => default_word_cost(a, b),
            SubstitutionCost::Custom(f) => f(a, b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CostSpec {
    pub substitution: SubstitutionCost,
    pub insertion: f64,
    pub deletion: f64,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            substitution: SubstitutionCost::CharacterEdit,
            insertion: 1.0,
            deletion: 1.0,
        }
    }
}

impl CostSpec {
    /// Unit substitution, insertion and deletion: total cost equals the word
    /// edit distance.
    pub fn unit() -> Self {
        Self {
            substitution: SubstitutionCost::Unit,
            insertion: 1.0,
            deletion: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.insertion.is_finite() && self.insertion >= 0.0) {
            return Err(AlignError::InvalidCost("insertion cost must be finite and >= 0"));
        }
        if !(self.deletion.is_finite() && self.deletion >= 0.0) {
            return Err(AlignError::InvalidCost("deletion cost must be finite and >= 0"));
        }
        Ok(())
    }
}

/// One step of an alignment. Indices are 0-based word ordinals (punctuation
/// excluded). `Insert::ref_pos` is the number of reference words consumed
/// before the inserted hypothesis word, i.e. it sits between reference words
/// `ref_pos - 1` and `ref_pos`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Match {
        #[serde(rename = "ref")]
        ref_idx: usize,
        hyp: usize,
    },
    Substitute {
        #[serde(rename = "ref")]
        ref_idx: usize,
        hyp: usize,
        cost: f64,
    },
    Delete {
        #[serde(rename = "ref")]
        ref_idx: usize,
        cost: f64,
    },
    Insert {
        ref_pos: usize,
        hyp: usize,
        cost: f64,
    },
}

impl EditOp {
    pub fn cost(&self) -> f64 {
        match *self {
            EditOp::Match { .. } => 0.0,
            EditOp::Substitute { cost, .. }
            | EditOp::Delete { cost, .. }
            | EditOp::Insert { cost, .. } => cost,
        }
    }

    pub fn is_match(&self) -> bool {
        matches!(self, EditOp::Match { .. })
    }

    pub fn ref_index(&self) -> Option<usize> {
        match *self {
            EditOp::Match { ref_idx, .. }
            | EditOp::Substitute { ref_idx, .. }
            | EditOp::Delete { ref_idx, .. } => Some(ref_idx),
            EditOp::Insert { .. } => None,
        }
    }

    pub fn hyp_index(&self) -> Option<usize> {
        match *self {
            EditOp::Match { hyp, .. }
            | EditOp::Substitute { hyp, .. }
            | EditOp::Insert { hyp, .. } => Some(hyp),
            EditOp::Delete { .. } => None,
        }
    }
}

/// Grid points `(i, j)` from `(0, 0)` to `(n, m)`, where `i` counts consumed
/// reference words and `j` consumed hypothesis words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpingPath {
    pub steps: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// The mismatching steps of an alignment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancySet {
    pub ops: Vec<EditOp>,
}

impl DiscrepancySet {
    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub path: WarpingPath,
    /// Every step including matches, in path order.
    pub ops: Vec<EditOp>,
    pub discrepancies: DiscrepancySet,
}

impl Alignment {
    pub fn total_cost(&self) -> f64 {
        self.path.total_cost
    }

    pub fn counts(&self) -> EditCounts {
        let mut c = EditCounts::default();
        for op in &self.ops {
            match op {
                EditOp::Match { .. } => c.matches += 1,
                EditOp::Substitute { .. } => c.substitutions += 1,
                EditOp::Delete { .. } => c.deletions += 1,
                EditOp::Insert { .. } => c.insertions += 1,
            }
        }
        c
    }
}

/// Normalized character-level Levenshtein distance, in `[0, 1]`.
pub fn default_word_cost(a: &str, b: &str) -> f64 {
    if a == b {
        return 0.0;
    }
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let longest = a.len().max(b.len());
    if longest == 0 {
        return 0.0;
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()] as f64 / longest as f64
}

/// Aligns the words of `reference` against the words of `hypothesis`
/// (punctuation dropped) and returns the globally cheapest path together
/// with its edit-operation decomposition.
pub fn dtw_align(reference: &TextSequence, hypothesis: &TextSequence, cost: &CostSpec) -> Alignment {
    let r = reference.word_vec();
    let h = hypothesis.word_vec();
    align_words(&r, &h, cost)
}

pub fn align_words(r: &[&str], h: &[&str], cost: &CostSpec) -> Alignment {
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut table = vec![0.0f64; (n + 1) * w];
    for j in 1..=m {
        table[j] = table[j - 1] + cost.insertion;
    }
    for i in 1..=n {
        table[i * w] = table[(i - 1) * w] + cost.deletion;
        for j in 1..=m {
            let diag = table[(i - 1) * w + j - 1] + cost.substitution.cost(r[i - 1], h[j - 1]);
            let del = table[(i - 1) * w + j] + cost.deletion;
            let ins = table[i * w + j - 1] + cost.insertion;
            table[i * w + j] = diag.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let mut steps = Vec::with_capacity(n + m + 1);
    let (mut i, mut j) = (n, m);
    steps.push((i, j));
    while i > 0 || j > 0 {
        let here = table[i * w + j];
        if i > 0 && j > 0 {
            let c = cost.substitution.cost(r[i - 1], h[j - 1]);
            if table[(i - 1) * w + j - 1] + c == here {
                ops.push(if r[i - 1] == h[j - 1] {
                    EditOp::Match {
                        ref_idx: i - 1,
                        hyp: j - 1,
                    }
                } else {
                    EditOp::Substitute {
                        ref_idx: i - 1,
                        hyp: j - 1,
                        cost: c,
                    }
                });
                i -= 1;
                j -= 1;
                steps.push((i, j));
                continue;
            }
        }
        if i > 0 && table[(i - 1) * w + j] + cost.deletion == here {
            ops.push(EditOp::Delete {
                ref_idx: i - 1,
                cost: cost.deletion,
            });
            i -= 1;
        } else {
            ops.push(EditOp::Insert {
                ref_pos: i,
                hyp: j - 1,
                cost: cost.insertion,
            });
            j -= 1;
        }
        steps.push((i, j));
    }
    ops.reverse();
    steps.reverse();

    let discrepancies = DiscrepancySet {
        ops: ops.iter().filter(|o| !o.is_match()).copied().collect(),
    };
    Alignment {
        path: WarpingPath {
            steps,
            total_cost: table[n * w + m],
        },
        ops,
        discrepancies,
    }
}

/// Time intervals implicated by each discrepancy, one list per op.
///
/// Substituted and deleted words map to their word segments. An inserted
/// word maps to the gap between its neighbours: from the end of the first
/// segment of reference word `ref_pos - 1` (or 0) to the start of the last
/// segment of reference word `ref_pos` (or the track end). Empty gaps map to
/// nothing.
pub fn discrepancy_intervals(
    o: &DiscrepancySet,
    reference: &TextSequence,
    track: &SpeechTrack,
) -> Result<Vec<Vec<TimeInterval>>, AlignError> {
    let n = reference.word_count();
    let segments_of = |w: usize| -> Result<Vec<TimeInterval>, AlignError> {
        let v: Vec<TimeInterval> = track.segments_of(w).map(|s| s.interval()).collect();
        if v.is_empty() {
            Err(AlignError::UnalignedWord(w))
        } else {
            Ok(v)
        }
    };
    o.ops
        .iter()
        .map(|op| match *op {
            EditOp::Match { .. } => Ok(Vec::new()),
            EditOp::Substitute { ref_idx, .. } | EditOp::Delete { ref_idx, .. } => {
                segments_of(ref_idx)
            }
            EditOp::Insert { ref_pos, .. } => {
                let lo = if ref_pos == 0 {
                    0.0
                } else {
                    segments_of(ref_pos - 1)?[0].end()
                };
                let hi = if ref_pos >= n {
                    track.duration()
                } else {
                    segments_of(ref_pos)?.last().map_or(track.duration(), |iv| iv.start())
                };
                Ok(TimeInterval::checked(lo, hi).into_iter().collect())
            }
        })
        .collect()
}

/// Union of the time intervals implicated by the discrepancies.
pub fn map_discrepancies_to_words(
    o: &DiscrepancySet,
    reference: &TextSequence,
    track: &SpeechTrack,
) -> Result<TimeScope, AlignError> {
    let per_op = discrepancy_intervals(o, reference, track)?;
    Ok(TimeScope::from_intervals(per_op.into_iter().flatten()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{Frame, SpeechTrack};
    use proptest::prelude::*;

    fn seq(s: &str) -> TextSequence {
        TextSequence::parse(s)
    }

    /// Minimum cost over every monotone path, by exhaustive recursion.
    fn brute_min(r: &[&str], h: &[&str], cost: &CostSpec, i: usize, j: usize, acc: f64) -> f64 {
        if i == r.len() && j == h.len() {
            return acc;
        }
        let mut best = f64::INFINITY;
        if i < r.len() && j < h.len() {
            best = best.min(brute_min(
                r,
                h,
                cost,
                i + 1,
                j + 1,
                acc + cost.substitution.cost(r[i], h[j]),
            ));
        }
        if i < r.len() {
            best = best.min(brute_min(r, h, cost, i + 1, j, acc + cost.deletion));
        }
        if j < h.len() {
            best = best.min(brute_min(r, h, cost, i, j + 1, acc + cost.insertion));
        }
        best
    }

    #[test]
    fn identical_sequences_cost_nothing() {
        let a = dtw_align(&seq("a b c"), &seq("a b c"), &CostSpec::unit());
        assert_eq!(a.total_cost(), 0.0);
        assert!(a.discrepancies.is_empty());
        assert!(a.ops.iter().all(EditOp::is_match));
    }

    #[test]
    fn single_substitution() {
        let r = ["a", "b", "c"];
        let h = ["a", "x", "c"];
        let oracle = brute_min(&r, &h, &CostSpec::unit(), 0, 0, 0.0);
        let a = dtw_align(&seq("a b c"), &seq("a x c"), &CostSpec::unit());
        assert_eq!(oracle, 1.0);
        assert_eq!(a.total_cost(), oracle);
        assert_eq!(
            a.discrepancies.ops,
            [EditOp::Substitute {
                ref_idx: 1,
                hyp: 1,
                cost: 1.0
            }]
        );
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let cost = CostSpec {
            deletion: 0.75,
            ..CostSpec::unit()
        };
        let a = dtw_align(&seq("a b"), &seq(""), &cost);
        assert_eq!(a.total_cost(), 1.5);
        assert_eq!(
            a.discrepancies.ops,
            [
                EditOp::Delete {
                    ref_idx: 0,
                    cost: 0.75
                },
                EditOp::Delete {
                    ref_idx: 1,
                    cost: 0.75
                }
            ]
        );
        let b = dtw_align(&seq(""), &seq("x"), &cost);
        assert_eq!(b.discrepancies.ops.len(), 1);
        assert!(matches!(b.discrepancies.ops[0], EditOp::Insert { ref_pos: 0, .. }));
    }

    #[test]
    fn word_cost_examples() {
        assert_eq!(default_word_cost("cat", "cat"), 0.0);
        assert!((default_word_cost("cat", "bat") - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(default_word_cost("a", "xyz"), 1.0);
    }

    #[test]
    fn punctuation_and_case_ignored() {
        let a = dtw_align(&seq("Hello, world."), &seq("hello world"), &CostSpec::default());
        assert!(a.discrepancies.is_empty());
    }

    #[test]
    fn tie_break_prefers_diagonal_then_delete() {
        // "a b" vs "b": deleting a then matching b costs 1; substituting a->b
        // then deleting b also costs 1 with unit costs.
        let a = dtw_align(&seq("a b"), &seq("b"), &CostSpec::unit());
        assert_eq!(a.total_cost(), 1.0);
        assert_eq!(
            a.ops,
            [
                EditOp::Delete {
                    ref_idx: 0,
                    cost: 1.0
                },
                EditOp::Match { ref_idx: 1, hyp: 0 }
            ]
        );
    }

    fn fixture_track() -> SpeechTrack {
        // four words on a 0.2 s hop: [0,0.4) [1.0,1.6) [2.4,3.0) [3.0,3.4)
        let frames = (0..17).map(|_| Frame::word("w")).collect();
        SpeechTrack::from_frame_segments(frames, 0.2, &[(0, 0..2), (1, 5..8), (2, 12..15), (3, 15..17)])
            .unwrap()
    }

    fn pairs(s: &TimeScope) -> Vec<(f64, f64)> {
        s.iter().map(|iv| (iv.start(), iv.end())).collect()
    }

    fn close(a: &[(f64, f64)], b: &[(f64, f64)]) -> bool {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| (x.0 - y.0).abs() < 1e-9 && (x.1 - y.1).abs() < 1e-9)
    }

    #[test]
    fn discrepancy_mapping() {
        let t = fixture_track();
        let r = seq("w0 w1 w2 w3");
        assert!(map_discrepancies_to_words(&DiscrepancySet::default(), &r, &t)
            .unwrap()
            .is_empty());
        let sub = DiscrepancySet {
            ops: vec![EditOp::Substitute {
                ref_idx: 1,
                hyp: 1,
                cost: 1.0,
            }],
        };
        assert!(close(
            &pairs(&map_discrepancies_to_words(&sub, &r, &t).unwrap()),
            &[(1.0, 1.6)]
        ));
        // inserted material between word 1 [1.0,1.6) and word 2 [2.4,3.0)
        let ins = DiscrepancySet {
            ops: vec![EditOp::Insert {
                ref_pos: 2,
                hyp: 2,
                cost: 1.0,
            }],
        };
        assert!(close(
            &pairs(&map_discrepancies_to_words(&ins, &r, &t).unwrap()),
            &[(1.6, 2.4)]
        ));
        // adjacent words leave no gap
        let tight = DiscrepancySet {
            ops: vec![EditOp::Insert {
                ref_pos: 3,
                hyp: 3,
                cost: 1.0,
            }],
        };
        assert!(map_discrepancies_to_words(&tight, &r, &t).unwrap().is_empty());
    }

    #[test]
    fn unaligned_word_is_reported() {
        let t = fixture_track();
        let r = seq("w0 w1 w2 w3 w4");
        let o = DiscrepancySet {
            ops: vec![EditOp::Delete {
                ref_idx: 4,
                cost: 1.0,
            }],
        };
        assert_eq!(
            map_discrepancies_to_words(&o, &r, &t),
            Err(AlignError::UnalignedWord(4))
        );
    }

    const ALPHABET: [&str; 4] = ["ab", "ba", "abc", "c"];

    fn arb_words() -> impl Strategy<Value = Vec<&'static str>> {
        prop::collection::vec(prop::sample::select(&ALPHABET[..]), 0..=6)
    }

    fn levenshtein_words(r: &[&str], h: &[&str]) -> usize {
        let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=h.len() {
            d[0][j] = j;
        }
        for i in 1..=r.len() {
            for j in 1..=h.len() {
                d[i][j] = (d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]))
                    .min(d[i - 1][j] + 1)
                    .min(d[i][j - 1] + 1);
            }
        }
        d[r.len()][h.len()]
    }

    proptest! {
        #[test]
        fn optimal_against_enumeration(r in arb_words(), h in arb_words()) {
            for cost in [CostSpec::unit(), CostSpec::default()] {
                let a = align_words(&r, &h, &cost);
                prop_assert_eq!(a.total_cost(), brute_min(&r, &h, &cost, 0, 0, 0.0));
                // op costs reproduce the total
                let sum: f64 = a.ops.iter().map(EditOp::cost).sum();
                prop_assert!((sum - a.total_cost()).abs() < 1e-12);
            }
        }

        #[test]
        fn unit_cost_is_edit_distance(r in arb_words(), h in arb_words()) {
            let a = align_words(&r, &h, &CostSpec::unit());
            prop_assert_eq!(a.total_cost(), levenshtein_words(&r, &h) as f64);
            prop_assert_eq!(a.counts().errors(), levenshtein_words(&r, &h));
        }

        #[test]
        fn ops_project_onto_both_sequences(r in arb_words(), h in arb_words()) {
            let a = align_words(&r, &h, &CostSpec::default());
            let refs: Vec<usize> = a.ops.iter().filter_map(EditOp::ref_index).collect();
            let hyps: Vec<usize> = a.ops.iter().filter_map(EditOp::hyp_index).collect();
            prop_assert_eq!(refs, (0..r.len()).collect::<Vec<_>>());
            prop_assert_eq!(hyps, (0..h.len()).collect::<Vec<_>>());
            prop_assert_eq!(a.path.steps.first().copied(), Some((0, 0)));
            prop_assert_eq!(a.path.steps.last().copied(), Some((r.len(), h.len())));
            for w in a.path.steps.windows(2) {
                let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(di <= 1 && dj <= 1 && di + dj >= 1);
            }
            prop_assert_eq!(a.discrepancies.is_empty(), r == h);
        }

        #[test]
        fn word_cost_symmetric_and_bounded(a in "[a-e]{1,6}", b in "[a-e]{1,6}") {
            let x = default_word_cost(&a, &b);
            prop_assert_eq!(x, default_word_cost(&b, &a));
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x == 0.0, a == b);
        }
    }
}
