//! Preference pairs from repeated generations of one prompt, and their
//! conversion into inputs for the preference objective.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{full_mask, DpoInputs};
use crate::scope::TimeScope;
use crate::track::QualityScore;

/// WER values closer than this are treated as equal.
pub const WER_TIE_BAND: f64 = 1e-9;
/// Quality values closer than this are treated as equal.
pub const QUALITY_TIE_BAND: f64 = 0.1;

/// One evaluated generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedSample {
    pub prompt_id: String,
    pub sample_id: String,
    pub wer: f64,
    pub quality: QualityScore,
    pub error_scope: TimeScope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub winner_id: String,
    pub loser_id: String,
    pub winner_quality: QualityScore,
    pub loser_quality: QualityScore,
    pub winner_wer: f64,
    pub loser_wer: f64,
    pub loser_error_scope: TimeScope,
}

impl PreferencePair {
    pub fn pair_id(&self) -> String {
        alloc::format!("{}:{}>{}", self.prompt_id, self.winner_id, self.loser_id)
    }
}

/// Lexicographic preference on `(wer, quality)`: lower WER wins; on a WER
/// tie, higher quality wins; a tie on both is `Equal`. `Greater` means `a`
/// is preferred.
pub fn prefer(a_wer: f64, a_quality: f64, b_wer: f64, b_quality: f64) -> Ordering {
    if (a_wer - b_wer).abs() > WER_TIE_BAND {
        return if a_wer < b_wer {
            Ordering::Greater
        } else {
            Ordering::Less
        };
    }
    if (a_quality - b_quality).abs() >= QUALITY_TIE_BAND {
        return if a_quality > b_quality {
            Ordering::Greater
        } else {
            Ordering::Less
        };
    }
    Ordering::Equal
}

pub fn prefer_samples(a: &EvaluatedSample, b: &EvaluatedSample) -> Ordering {
    prefer(a.wer, a.quality.value(), b.wer, b.quality.value())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Best against worst per prompt.
    #[default]
    Extreme,
    /// Every strictly ordered pair.
    All,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkippedGroup {
    GroupTooSmall { prompt_id: String, size: usize },
    NoStrictPreference { prompt_id: String },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairingReport {
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<SkippedGroup>,
}

fn make_pair(w: &EvaluatedSample, l: &EvaluatedSample) -> PreferencePair {
    PreferencePair {
        prompt_id: w.prompt_id.clone(),
        winner_id: w.sample_id.clone(),
        loser_id: l.sample_id.clone(),
        winner_quality: w.quality,
        loser_quality: l.quality,
        winner_wer: w.wer,
        loser_wer: l.wer,
        loser_error_scope: l.error_scope.clone(),
    }
}

/// Groups samples by prompt (in order of first appearance) and emits
/// preference pairs within each group.
pub fn build_pairs(samples: &[EvaluatedSample], mode: PairMode) -> PairingReport {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&EvaluatedSample>> = BTreeMap::new();
    for s in samples {
        let g = groups.entry(s.prompt_id.as_str()).or_default();
        if g.is_empty() {
            order.push(s.prompt_id.as_str());
        }
        g.push(s);
    }
    let mut report = PairingReport::default();
    for prompt in order {
        let group = &groups[prompt];
        if group.len() < 2 {
            report.skipped.push(SkippedGroup::GroupTooSmall {
                prompt_id: prompt.into(),
                size: group.len(),
            });
            continue;
        }
        let before = report.pairs.len();
        match mode {
            PairMode::All => {
                for a in group {
                    for b in group {
                        if prefer_samples(a, b) == Ordering::Greater {
                            report.pairs.push(make_pair(a, b));
                        }
                    }
                }
            }
            PairMode::Extreme => {
                // widest WER gap, then widest quality gap; first found wins ties
                let mut pick: Option<(&EvaluatedSample, &EvaluatedSample)> = None;
                for a in group {
                    for b in group {
                        if prefer_samples(a, b) != Ordering::Greater {
                            continue;
                        }
                        let wider = pick.map_or(true, |(pa, pb)| {
                            let gap = (b.wer - a.wer, a.quality.value() - b.quality.value());
                            let cur = (pb.wer - pa.wer, pa.quality.value() - pb.quality.value());
                            gap.0 > cur.0 || (gap.0 == cur.0 && gap.1 > cur.1)
                        });
                        if wider {
                            pick = Some((a, b));
                        }
                    }
                }
                if let Some((w, l)) = pick {
                    report.pairs.push(make_pair(w, l));
                }
            }
        }
        if report.pairs.len() == before {
            report.skipped.push(SkippedGroup::NoStrictPreference {
                prompt_id: prompt.into(),
            });
        }
    }
    report
}

/// Noise and the two model predictions for one sample at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub eps: Vec<f64>,
    pub pred_theta: Vec<f64>,
    pub pred_ref: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("no residuals for sample {0}")]
    Missing(String),
    #[error("residual vectors differ in length: {0} vs {1}")]
    ProviderMismatch(usize, usize),
}

pub trait ResidualProvider {
    fn residuals(&self, sample_id: &str, timestep: u32) -> Result<Residuals, ProviderError>;
}

/// Residuals held in memory, keyed by sample id (timestep ignored).
impl ResidualProvider for BTreeMap<String, Residuals> {
    fn residuals(&self, sample_id: &str, _timestep: u32) -> Result<Residuals, ProviderError> {
        self.get(sample_id)
            .cloned()
            .ok_or_else(|| ProviderError::Missing(sample_id.into()))
    }
}

fn check_lengths(r: &Residuals) -> Result<usize, ProviderError> {
    let n = r.eps.len();
    for v in [&r.pred_theta, &r.pred_ref] {
        if v.len() != n {
            return Err(ProviderError::ProviderMismatch(n, v.len()));
        }
    }
    Ok(n)
}

/// Frame mask of a scope: frame `k` is set when
/// `floor(start / hop) <= k < floor(end / hop)` for some interval.
pub fn scope_frame_mask(scope: &TimeScope, hop_s: f64, len: usize) -> Vec<bool> {
    let to_frame = |t: f64| {
        let f = libm::floor(t / hop_s + 1e-9);
        if f <= 0.0 {
            0
        } else {
            (f as usize).min(len)
        }
    };
    let mut mask = alloc::vec![false; len];
    for iv in scope {
        for m in &mut mask[to_frame(iv.start())..to_frame(iv.end()).max(to_frame(iv.start()))] {
            *m = true;
        }
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoSettings {
    pub beta: f64,
    pub timestep: u32,
    pub horizon: u32,
    pub hop_s: f64,
}

/// Fetches residuals for both sides of `pair` and attaches frame masks: the
/// loser's from its error scope, the winner's all-true.
pub fn pair_to_dpo_inputs<P: ResidualProvider + ?Sized>(
    pair: &PreferencePair,
    provider: &P,
    settings: &DpoSettings,
) -> Result<DpoInputs, ProviderError> {
    let w = provider.residuals(&pair.winner_id, settings.timestep)?;
    let l = provider.residuals(&pair.loser_id, settings.timestep)?;
    let nw = check_lengths(&w)?;
    let nl = check_lengths(&l)?;
    if nw != nl {
        return Err(ProviderError::ProviderMismatch(nw, nl));
    }
    Ok(DpoInputs {
        eps_w: w.eps,
        eps_l: l.eps,
        pred_theta_w: w.pred_theta,
        pred_theta_l: l.pred_theta,
        pred_ref_w: w.pred_ref,
        pred_ref_l: l.pred_ref,
        beta: settings.beta,
        timestep: settings.timestep,
        horizon: settings.horizon,
        frame_mask_w: Some(full_mask(nw)),
        frame_mask_l: Some(scope_frame_mask(&pair.loser_error_scope, settings.hop_s, nl)),
    })
}
