//! Erroneous-speech manifests: sample records, stratified splitting and
//! per-issue statistics.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, stream};
use crate::scope::TimeScope;
pub use crate::sim::IssueType;
use crate::text::TextSequence;
use crate::track::QualityScore;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("sample {id}: {reason}")]
    InvariantViolation { id: String, reason: String },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("split ratios must be positive and sum to 1")]
    InvalidRatios,
    #[error("splitting needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("manifest has no samples")]
    EmptyManifest,
}

/// A manifest line as written on disk, before invariant checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawSample {
    pub id: String,
    pub target_text: TextSequence,
    pub track_path: String,
    pub error_scope: TimeScope,
    pub quality: f64,
    pub issue_type: IssueType,
    pub transcript: TextSequence,
    pub audio_len_s: f64,
}

/// One annotated utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSample", into = "RawSample")]
pub struct FgesSample {
    pub id: String,
    pub target_text: TextSequence,
    pub track_path: String,
    pub error_scope: TimeScope,
    pub quality: QualityScore,
    pub issue_type: IssueType,
    pub transcript: TextSequence,
    pub audio_len_s: f64,
}

impl TryFrom<RawSample> for FgesSample {
    type Error = DatasetError;

    fn try_from(r: RawSample) -> Result<Self, Self::Error> {
        let violation = |reason: &str| DatasetError::InvariantViolation {
            id: r.id.clone(),
            reason: reason.into(),
        };
        let quality = QualityScore::new(r.quality)
            .map_err(|_| violation(&format!("quality {} outside [1, 10]", r.quality)))?;
        if r.issue_type == IssueType::Clean && !r.error_scope.is_empty() {
            return Err(violation("clean sample with a nonempty error scope"));
        }
        if !(r.audio_len_s.is_finite() && r.audio_len_s >= 0.0) {
            return Err(violation("audio length must be nonnegative"));
        }
        if r.id.is_empty() {
            return Err(violation("empty id"));
        }
        Ok(FgesSample {
            id: r.id,
            target_text: r.target_text,
            track_path: r.track_path,
            error_scope: r.error_scope,
            quality,
            issue_type: r.issue_type,
            transcript: r.transcript,
            audio_len_s: r.audio_len_s,
        })
    }
}

impl From<FgesSample> for RawSample {
    fn from(s: FgesSample) -> Self {
        RawSample {
            id: s.id,
            target_text: s.target_text,
            track_path: s.track_path,
            error_scope: s.error_scope,
            quality: s.quality.value(),
            issue_type: s.issue_type,
            transcript: s.transcript,
            audio_len_s: s.audio_len_s,
        }
    }
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 20.0 / 22.0,
            val: 1.0 / 22.0,
            test: 1.0 / 22.0,
        }
    }
}

impl SplitRatios {
    /// Normalizes positive weights, e.g. `(20, 1, 1)`.
    pub fn from_weights(train: f64, val: f64, test: f64) -> Result<Self, DatasetError> {
        let total = train + val + test;
        let ok = [train, val, test].iter().all(|w| w.is_finite() && *w > 0.0);
        if !ok {
            return Err(DatasetError::InvalidRatios);
        }
        Ok(Self {
            train: train / total,
            val: val / total,
            test: test / total,
        })
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let r = self.as_array();
        if r.iter().all(|x| x.is_finite() && *x > 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= 1e-9 {
            Ok(())
        } else {
            Err(DatasetError::InvalidRatios)
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FgesManifest {
    pub samples: Vec<FgesSample>,
    pub split_ratios: SplitRatios,
}

impl FgesManifest {
    pub fn new(samples: Vec<FgesSample>, split_ratios: SplitRatios) -> Result<Self, DatasetError> {
        split_ratios.validate()?;
        let mut ids = BTreeSet::new();
        for s in &samples {
            if !ids.insert(s.id.as_str()) {
                return Err(DatasetError::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self {
            samples,
            split_ratios,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sample indices of each part, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Largest-remainder apportionment of `n` by `ratios`, then at least one
/// sample per part, taken from the largest part.
pub fn split_sizes(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let r = ratios.as_array();
    let quotas: Vec<f64> = r.iter().map(|x| x * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = libm::floor(*q + 1e-9) as usize;
    }
    let assigned: usize = sizes.iter().sum();
    let mut order = [0usize, 1, 2];
    let rem = |i: usize| quotas[i] - sizes[i] as f64;
    order.sort_by(|&a, &b| rem(b).total_cmp(&rem(a)).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    if n >= 3 {
        for i in 0..3 {
            if sizes[i] == 0 {
                let donor = (0..3).max_by_key(|&j| (sizes[j], usize::MAX - j)).unwrap_or(0);
                sizes[donor] -= 1;
                sizes[i] += 1;
            }
        }
    }
    sizes
}

/// Bipartite unit-capacity flow: finds a 0/1 matrix with the given row and
/// column sums using only allowed cells.
fn round_table(row: &[usize], col: &[usize], allowed: &[Vec<bool>]) -> Option<Vec<Vec<bool>>> {
    let (nr, nc) = (row.len(), col.len());
    let mut x = vec![vec![false; nc]; nr];
    let mut row_used = vec![0usize; nr];
    let mut col_used = vec![0usize; nc];

    // augmenting paths alternate row -> col (unused cell) and col -> row (used cell)
    fn augment(
        r: usize,
        x: &mut [Vec<bool>],
        allowed: &[Vec<bool>],
        col: &[usize],
        col_used: &mut [usize],
        seen: &mut [bool],
    ) -> bool {
        for c in 0..col.len() {
            if !allowed[r][c] || x[r][c] || seen[c] {
                continue;
            }
            seen[c] = true;
            if col_used[c] < col[c] {
                x[r][c] = true;
                col_used[c] += 1;
                return true;
            }
            for r2 in 0..x.len() {
                if x[r2][c] && r2 != r {
                    x[r2][c] = false;
                    if augment(r2, x, allowed, col, col_used, seen) {
                        x[r][c] = true;
                        return true;
                    }
                    x[r2][c] = true;
                }
            }
        }
        false
    }

    for r in 0..nr {
        while row_used[r] < row[r] {
            let mut seen = vec![false; nc];
            if !augment(r, &mut x, allowed, col, &mut col_used, &mut seen) {
                return None;
            }
            row_used[r] += 1;
        }
    }
    Some(x)
}

/// Seeded partition stratified by issue type. Each type's share of a part
/// is `count * size / n` rounded down or up, with row and column totals
/// preserved exactly.
pub fn split(manifest: &FgesManifest, seed: u64) -> Result<Split, DatasetError> {
    let n = manifest.len();
    if n < 3 {
        return Err(DatasetError::TooFewSamples(n));
    }
    manifest.split_ratios.validate()?;
    let sizes = split_sizes(n, &manifest.split_ratios);

    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); IssueType::ALL.len()];
    for (i, s) in manifest.samples.iter().enumerate() {
        let t = IssueType::ALL.iter().position(|x| *x == s.issue_type).unwrap_or(0);
        strata[t].push(i);
    }

    let mut table: Vec<[usize; 3]> = Vec::with_capacity(strata.len());
    let mut row_rem = Vec::with_capacity(strata.len());
    let mut allowed = Vec::with_capacity(strata.len());
    let mut col_rem = sizes;
    for members in &strata {
        let count = members.len();
        let mut base = [0usize; 3];
        let mut frac = vec![false; 3];
        for p in 0..3 {
            base[p] = count * sizes[p] / n;
            frac[p] = (count * sizes[p]) % n != 0;
            col_rem[p] -= base[p];
        }
        row_rem.push(count - base.iter().sum::<usize>());
        allowed.push(frac);
        table.push(base);
    }

    let mut rng = stream(seed, &[domain::SPLIT]);
    // randomize which cells get rounded up by permuting the row order
    let mut row_order: Vec<usize> = (0..strata.len()).collect();
    row_order.shuffle(&mut rng);
    let perm_rows: Vec<usize> = row_order.iter().map(|&t| row_rem[t]).collect();
    let perm_allowed: Vec<Vec<bool>> = row_order.iter().map(|&t| allowed[t].clone()).collect();
    let ups = round_table(&perm_rows, &col_rem, &perm_allowed)
        .expect("fractional table with integer margins always rounds");
    for (k, &t) in row_order.iter().enumerate() {
        for p in 0..3 {
            table[t][p] += usize::from(ups[k][p]);
        }
    }

    let mut parts: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (t, members) in strata.iter().enumerate() {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        let mut it = shuffled.into_iter();
        for p in 0..3 {
            parts[p].extend(it.by_ref().take(table[t][p]));
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub issue_type: IssueType,
    pub count: usize,
    pub avg_words: f64,
    pub avg_audio_len_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    /// One row per issue type present, in the canonical type order.
    pub rows: Vec<StatsRow>,
    pub total_count: usize,
    pub overall_avg_words: f64,
    pub overall_avg_audio_len_s: f64,
}

/// Per-issue sample count, mean target word count and mean audio length.
pub fn stats(manifest: &FgesManifest) -> Result<StatsTable, DatasetError> {
    if manifest.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let mut rows = Vec::new();
    for t in IssueType::ALL {
        let (mut count, mut words, mut len) = (0usize, 0.0f64, 0.0f64);
        for s in manifest.samples.iter().filter(|s| s.issue_type == t) {
            count += 1;
            words += s.target_text.word_count() as f64;
            len += s.audio_len_s;
        }
        if count > 0 {
            rows.push(StatsRow {
                issue_type: t,
                count,
                avg_words: words / count as f64,
                avg_audio_len_s: len / count as f64,
            });
        }
    }
    let n = manifest.len() as f64;
    let words: f64 = manifest.samples.iter().map(|s| s.target_text.word_count() as f64).sum();
    let len: f64 = manifest.samples.iter().map(|s| s.audio_len_s).sum();
    Ok(StatsTable {
        rows,
        total_count: manifest.len(),
        overall_avg_words: words / n,
        overall_avg_audio_len_s: len / n,
    })
}

impl StatsTable {
    /// CSV with header `issue_type,count,avg_words,avg_audio_len_s`, one row
    /// per issue type and a final `all` row; averages to four decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("issue_type,count,avg_words,avg_audio_len_s\n");
        for r in &self.rows {
            out += &format!(
                "{},{},{:.4},{:.4}\n",
                r.issue_type, r.count, r.avg_words, r.avg_audio_len_s
            );
        }
        out += &format!(
            "all,{},{:.4},{:.4}\n",
            self.total_count, self.overall_avg_words, self.overall_avg_audio_len_s
        );
        out
    }
}
