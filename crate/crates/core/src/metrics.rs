//! Evaluation metrics: word error rate, interval IOU, MSE on clean samples,
//! utterance-level Pearson, system-level Spearman and failure rate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::{dtw_align, CostSpec, EditCounts};
use crate::scope::TimeScope;
use crate::text::TextSequence;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("reference has no words")]
    EmptyReference,
    #[error("IOU undefined: both scopes are empty")]
    UndefinedIou,
    #[error("no input values")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
}

/// Substitution, deletion and insertion counts from a unit-cost alignment.
pub fn wer_counts(reference: &TextSequence, hypothesis: &TextSequence) -> EditCounts {
    dtw_align(reference, hypothesis, &CostSpec::unit()).counts()
}

/// `(S + D + I) / N` over words; punctuation is ignored. May exceed 1.
pub fn wer(reference: &TextSequence, hypothesis: &TextSequence) -> Result<f64, MetricsError> {
    let n = reference.word_count();
    if n == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(wer_counts(reference, hypothesis).errors() as f64 / n as f64)
}

/// Pooled WER over a corpus: total edits over total reference words.
pub fn corpus_wer<'a, I>(pairs: I) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a TextSequence, &'a TextSequence)>,
{
    let (mut errors, mut words) = (0usize, 0usize);
    for (r, h) in pairs {
        errors += wer_counts(r, h).errors();
        words += r.word_count();
    }
    if words == 0 {
        return Err(MetricsError::EmptyReference);
    }
    Ok(errors as f64 / words as f64)
}

/// Measure-theoretic intersection over union of two scopes.
pub fn scope_iou(pred: &TimeScope, truth: &TimeScope) -> Result<f64, MetricsError> {
    let inter = pred.intersection_length(truth);
    let union = pred.total_length() + truth.total_length() - inter;
    if union <= 0.0 {
        return Err(MetricsError::UndefinedIou);
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Mean of per-utterance IOUs.
pub fn mean_iou<'a, I>(pairs: I) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a TimeScope, &'a TimeScope)>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pairs {
        sum += scope_iou(p, t)?;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(sum / n as f64)
}

/// IOU with intersections and unions summed over utterances first.
pub fn pooled_iou<'a, I>(pairs: I) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = (&'a TimeScope, &'a TimeScope)>,
{
    let (mut inter, mut union) = (0.0, 0.0);
    for (p, t) in pairs {
        let i = p.intersection_length(t);
        inter += i;
        union += p.total_length() + t.total_length() - i;
    }
    if union <= 0.0 {
        return Err(MetricsError::UndefinedIou);
    }
    Ok(inter / union)
}

/// Mean squared frame probability over clean samples, whose labels are all 0.
pub fn mse_clean<'a, I>(per_sample_probs: I) -> Result<f64, MetricsError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let (mut sum, mut n) = (0.0, 0usize);
    for probs in per_sample_probs {
        sum += probs.iter().map(|p| p * p).sum::<f64>();
        n += probs.len();
    }
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(sum / n as f64)
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::DegenerateInput("constant vector"));
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Pearson correlation of paired utterance-level scores.
pub fn utt_pcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    pearson(x, y)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && values[order[end]] == values[order[k]] {
            end += 1;
        }
        // positions k..end hold ranks k+1..=end
        let r = (k + 1 + end) as f64 / 2.0;
        for &idx in &order[k..end] {
            ranks[idx] = r;
        }
        k = end;
    }
    ranks
}

/// Spearman correlation: Pearson over average ranks. Inputs are per-system
/// values (see [`system_means`]).
pub fn sys_srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
        .map_err(|_| MetricsError::DegenerateInput("all ranks tie"))
}

/// Groups `(system, predicted, annotated)` triples and averages each group.
/// Output is ordered by system name.
pub fn system_means<'a, I>(records: I) -> (Vec<String>, Vec<f64>, Vec<f64>)
where
    I: IntoIterator<Item = (&'a str, f64, f64)>,
{
    let mut groups: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for (sys, p, a) in records {
        let g = groups.entry(sys).or_insert((0.0, 0.0, 0));
        g.0 += p;
        g.1 += a;
        g.2 += 1;
    }
    let mut names = Vec::with_capacity(groups.len());
    let mut preds = Vec::with_capacity(groups.len());
    let mut annots = Vec::with_capacity(groups.len());
    for (sys, (p, a, n)) in groups {
        names.push(String::from(sys));
        preds.push(p / n as f64);
        annots.push(a / n as f64);
    }
    (names, preds, annots)
}

/// A sample fails when `wer > wer_gate` or `quality < quality_gate`.
pub fn is_failure(wer: f64, quality: f64, wer_gate: f64, quality_gate: f64) -> bool {
    wer > wer_gate || quality < quality_gate
}

/// Fraction of `(final_wer, final_quality)` samples that fail the gates.
pub fn failure_rate(
    samples: &[(f64, f64)],
    wer_gate: f64,
    quality_gate: f64,
) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let failed = samples
        .iter()
        .filter(|(w, q)| is_failure(*w, *q, wer_gate, quality_gate))
        .count();
    Ok(failed as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub wer: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse_clean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub utt_pcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub sys_srcc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failure_rate: Option<f64>,
}

impl MetricReport {
    /// Checks that every present field lies in its range.
    pub fn is_valid(&self) -> bool {
        let unit = |v: Option<f64>| v.map_or(true, |x| (0.0..=1.0).contains(&x));
        let corr = |v: Option<f64>| v.map_or(true, |x| (-1.0..=1.0).contains(&x));
        self.wer >= 0.0
            && unit(self.iou)
            && self.mse_clean.map_or(true, |x| x >= 0.0)
            && corr(self.utt_pcc)
            && corr(self.sys_srcc)
            && unit(self.failure_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> TextSequence {
        TextSequence::parse(s)
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&seq("a b c"), &seq("a b c")).unwrap(), 0.0);
        assert_eq!(
            wer(&seq("the cat sat on mat"), &seq("the cat on mat")).unwrap(),
            0.2
        );
        assert_eq!(wer(&seq("a"), &seq("b c")).unwrap(), 2.0);
        assert_eq!(wer(&seq(", ."), &seq("a")), Err(MetricsError::EmptyReference));
        // punctuation never counts
        assert_eq!(wer(&seq("a, b."), &seq("a b !")).unwrap(), 0.0);
    }

    #[test]
    fn iou_examples() {
        let s = |p: &[(f64, f64)]| TimeScope::from_pairs(p.iter().copied());
        assert_eq!(scope_iou(&s(&[(1.0, 2.0)]), &s(&[(1.0, 2.0)])).unwrap(), 1.0);
        let third = scope_iou(&s(&[(1.0, 2.0)]), &s(&[(1.5, 2.5)])).unwrap();
        assert!((third - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(scope_iou(&s(&[]), &s(&[(1.0, 2.0)])).unwrap(), 0.0);
        assert_eq!(scope_iou(&s(&[]), &s(&[])), Err(MetricsError::UndefinedIou));
    }

    #[test]
    fn mse_clean_examples() {
        assert_eq!(mse_clean([&[0.0, 0.0][..]]).unwrap(), 0.0);
        assert!((mse_clean([&[0.1, 0.1][..]]).unwrap() - 0.01).abs() < 1e-15);
        assert_eq!(mse_clean([&[1.0][..]]).unwrap(), 1.0);
        assert_eq!(mse_clean([&[][..]]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn correlation_examples() {
        assert_eq!(utt_pcc(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(), 1.0);
        assert_eq!(utt_pcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = utt_pcc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        assert_eq!(
            utt_pcc(&[1.0, 1.0], &[1.0, 2.0]),
            Err(MetricsError::DegenerateInput("constant vector"))
        );
        assert_eq!(sys_srcc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(sys_srcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        let s = sys_srcc(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((s - 0.6).abs() < 1e-12);
        assert!(sys_srcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 20.0, 5.0]), [2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn system_grouping() {
        let (names, p, a) = system_means([("b", 1.0, 2.0), ("a", 3.0, 4.0), ("b", 3.0, 4.0)]);
        assert_eq!(names, ["a", "b"]);
        assert_eq!(p, [3.0, 2.0]);
        assert_eq!(a, [4.0, 3.0]);
    }

    #[test]
    fn failure_rate_examples() {
        assert_eq!(failure_rate(&[(0.0, 9.0); 5], 0.0, 6.0).unwrap(), 0.0);
        let mut v = vec![(0.0, 9.0); 43];
        v.extend([(0.5, 9.0); 7]);
        assert!((failure_rate(&v, 0.0, 6.0).unwrap() - 0.14).abs() < 1e-15);
        assert_eq!(failure_rate(&[(0.0, 1.0)], 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(failure_rate(&[], 0.0, 1.0), Err(MetricsError::EmptyInput));
    }
}
