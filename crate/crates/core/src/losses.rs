//! Training objectives as pure numeric functions, each with an analytic
//! gradient and a finite-difference checker.
//!
//! * frame-wise focal loss over per-frame error probabilities,
//! * mean squared error (timestamps and quality score),
//! * token cross-entropy,
//! * their unweighted sum,
//! * the diffusion preference objective, over full utterances or restricted
//!   to masked frames.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum LossError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no input values")]
    EmptyInput,
    #[error("distribution at position {0} does not sum to 1")]
    InvalidDistribution(usize),
    #[error("target at position {0} is outside the vocabulary")]
    IndexOutOfRange(usize),
    #[error("loss terms must be nonnegative")]
    NegativeLoss,
    #[error("beta must be positive")]
    NonPositiveBeta,
    #[error("timestep must lie in [0, horizon)")]
    InvalidTimestep,
    #[error("{0} mask is missing")]
    MissingMask(Branch),
    #[error("{0} mask selects no frames")]
    EmptyMask(Branch),
    #[error("non-finite value encountered")]
    NonFiniteValue,
    #[error("finite-difference step must lie in [1e-7, 1e-3]")]
    InvalidStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Winner,
    Loser,
}

impl core::fmt::Display for Branch {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(match self {
            Branch::Winner => "winner",
            Branch::Loser => "loser",
        })
    }
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

#[inline]
fn in_clamp_range(p: f64) -> bool {
    (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p)
}

fn same_len(a: usize, b: usize) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::LengthMismatch(a, b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Mean over frames of `-alpha * (1 - p_t)^gamma * ln(p_t)` with
/// `p_t = p` on positive frames and `1 - p` on negative ones.
pub fn focal_loss(probs: &[f64], labels: &[bool], gamma: f64, alpha: f64) -> Result<f64, LossError> {
    same_len(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            let pt = if y { p } else { 1.0 - p };
            -alpha * libm::pow(1.0 - pt, gamma) * libm::log(pt)
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Gradient of [`focal_loss`] with respect to `probs`.
pub fn focal_loss_grad(
    probs: &[f64],
    labels: &[bool],
    gamma: f64,
    alpha: f64,
) -> Result<Vec<f64>, LossError> {
    same_len(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if !in_clamp_range(p) {
                return 0.0;
            }
            let pt = if y { p } else { 1.0 - p };
            let q = 1.0 - pt;
            // d/dpt of -(1-pt)^g ln pt
            let modulating = if gamma == 0.0 {
                0.0
            } else {
                gamma * libm::pow(q, gamma - 1.0) * libm::log(pt)
            };
            let d_pt = alpha * (modulating - libm::pow(q, gamma) / pt);
            let d_p = if y { d_pt } else { -d_pt };
            d_p / n
        })
        .collect())
}

/// Mean binary cross-entropy, the `gamma = 0, alpha = 1` focal loss.
pub fn binary_cross_entropy(probs: &[f64], labels: &[bool]) -> Result<f64, LossError> {
    same_len(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y {
                -libm::log(p)
            } else {
                -libm::log(1.0 - p)
            }
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

pub fn binary_cross_entropy_grad(probs: &[f64], labels: &[bool]) -> Result<Vec<f64>, LossError> {
    same_len(probs.len(), labels.len())?;
    if probs.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            if !in_clamp_range(p) {
                0.0
            } else if y {
                -1.0 / (p * n)
            } else {
                1.0 / ((1.0 - p) * n)
            }
        })
        .collect())
}

/// Mean squared difference.
pub fn timestamp_mse(pred: &[f64], labels: &[f64]) -> Result<f64, LossError> {
    same_len(pred.len(), labels.len())?;
    if pred.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let sum: f64 = pred
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(sum / pred.len() as f64)
}

pub fn timestamp_mse_grad(pred: &[f64], labels: &[f64]) -> Result<Vec<f64>, LossError> {
    same_len(pred.len(), labels.len())?;
    if pred.is_empty() {
        return Err(LossError::EmptyInput);
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(labels)
        .map(|(p, y)| 2.0 * (p - y) / n)
        .collect())
}

fn token_ce_unchecked<D: AsRef<[f64]>>(dists: &[D], targets: &[usize]) -> f64 {
    let sum: f64 = dists
        .iter()
        .zip(targets)
        .map(|(d, &t)| -libm::log(clamp_prob(d.as_ref()[t])))
        .sum();
    sum / dists.len() as f64
}

fn check_token_inputs<D: AsRef<[f64]>>(dists: &[D], targets: &[usize]) -> Result<(), LossError> {
    same_len(dists.len(), targets.len())?;
    if dists.is_empty() {
        return Err(LossError::EmptyInput);
    }
    for (pos, (d, &t)) in dists.iter().zip(targets).enumerate() {
        let d = d.as_ref();
        if t >= d.len() {
            return Err(LossError::IndexOutOfRange(pos));
        }
        let s: f64 = d.iter().sum();
        if !s.is_finite() || (s - 1.0).abs() > 1e-6 || d.iter().any(|p| *p < 0.0) {
            return Err(LossError::InvalidDistribution(pos));
        }
    }
    Ok(())
}

/// Mean over positions of `-ln p(target)`.
pub fn token_ce<D: AsRef<[f64]>>(dists: &[D], targets: &[usize]) -> Result<f64, LossError> {
    check_token_inputs(dists, targets)?;
    Ok(token_ce_unchecked(dists, targets))
}

/// Gradient of [`token_ce`] with respect to every distribution entry,
/// flattened position-major.
pub fn token_ce_grad<D: AsRef<[f64]>>(dists: &[D], targets: &[usize]) -> Result<Vec<f64>, LossError> {
    check_token_inputs(dists, targets)?;
    Ok(token_ce_grad_unchecked(dists, targets))
}

fn token_ce_grad_unchecked<D: AsRef<[f64]>>(dists: &[D], targets: &[usize]) -> Vec<f64> {
    let n = dists.len() as f64;
    let mut g = Vec::new();
    for (d, &t) in dists.iter().zip(targets) {
        let d = d.as_ref();
        let base = g.len();
        g.resize(base + d.len(), 0.0);
        if in_clamp_range(d[t]) {
            g[base + t] = -1.0 / (d[t] * n);
        }
    }
    g
}

/// Per-term multipliers for the composite objective. All 1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mse: f64,
    pub frame: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            frame: 1.0,
            ce: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_frame: f64,
    pub l_ce: f64,
    pub total: f64,
}

/// `L_total = L_mse + L_frame + L_ce`.
pub fn total_loss(l_mse: f64, l_frame: f64, l_ce: f64) -> Result<LossBreakdown, LossError> {
    total_loss_weighted(l_mse, l_frame, l_ce, &LossWeights::default())
}

/// Weighted composite. The breakdown stores the weighted terms so that
/// `total` is always their plain sum.
pub fn total_loss_weighted(
    l_mse: f64,
    l_frame: f64,
    l_ce: f64,
    w: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    let terms = [l_mse, l_frame, l_ce, w.mse, w.frame, w.ce];
    if terms.iter().any(|t| !t.is_finite()) {
        return Err(LossError::NonFiniteValue);
    }
    if terms.iter().any(|t| *t < 0.0) {
        return Err(LossError::NegativeLoss);
    }
    let (l_mse, l_frame, l_ce) = (w.mse * l_mse, w.frame * l_frame, w.ce * l_ce);
    Ok(LossBreakdown {
        l_mse,
        l_frame,
        l_ce,
        total: l_mse + l_frame + l_ce,
    })
}

/// Noise-prediction residuals for one preference pair at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoInputs {
    pub eps_w: Vec<f64>,
    pub eps_l: Vec<f64>,
    pub pred_theta_w: Vec<f64>,
    pub pred_theta_l: Vec<f64>,
    pub pred_ref_w: Vec<f64>,
    pub pred_ref_l: Vec<f64>,
    pub beta: f64,
    pub timestep: u32,
    pub horizon: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_mask_w: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_mask_l: Option<Vec<bool>>,
}

impl DpoInputs {
    pub fn len(&self) -> usize {
        self.eps_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps_w.is_empty()
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let n = self.eps_w.len();
        for v in [
            &self.eps_l,
            &self.pred_theta_w,
            &self.pred_theta_l,
            &self.pred_ref_w,
            &self.pred_ref_l,
        ] {
            same_len(n, v.len())?;
        }
        for m in [&self.frame_mask_w, &self.frame_mask_l].into_iter().flatten() {
            same_len(n, m.len())?;
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(LossError::NonPositiveBeta);
        }
        if self.timestep >= self.horizon {
            return Err(LossError::InvalidTimestep);
        }
        let all = [
            &self.eps_w,
            &self.eps_l,
            &self.pred_theta_w,
            &self.pred_theta_l,
            &self.pred_ref_w,
            &self.pred_ref_l,
        ];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(LossError::NonFiniteValue);
        }
        Ok(())
    }

    fn masks(&self) -> Result<(&[bool], &[bool]), LossError> {
        let w = self
            .frame_mask_w
            .as_deref()
            .ok_or(LossError::MissingMask(Branch::Winner))?;
        let l = self
            .frame_mask_l
            .as_deref()
            .ok_or(LossError::MissingMask(Branch::Loser))?;
        if !w.iter().any(|b| *b) {
            return Err(LossError::EmptyMask(Branch::Winner));
        }
        if !l.iter().any(|b| *b) {
            return Err(LossError::EmptyMask(Branch::Loser));
        }
        Ok((w, l))
    }
}

/// Selection and normalization applied to one branch's squared errors.
#[derive(Clone, Copy)]
struct Selection<'a> {
    mask: Option<&'a [bool]>,
    scale: f64,
}

impl<'a> Selection<'a> {
    fn full() -> Self {
        Self {
            mask: None,
            scale: 1.0,
        }
    }

    fn masked(mask: &'a [bool]) -> Self {
        let card = mask.iter().filter(|b| **b).count();
        Self {
            mask: Some(mask),
            scale: 1.0 / card as f64,
        }
    }

    fn selects(&self, k: usize) -> bool {
        self.mask.map_or(true, |m| m[k])
    }

    fn sq_err(&self, target: &[f64], pred: &[f64]) -> f64 {
        let s: f64 = target
            .iter()
            .zip(pred)
            .enumerate()
            .filter(|(k, _)| self.selects(*k))
            .map(|(_, (t, p))| (t - p) * (t - p))
            .sum();
        s * self.scale
    }
}

/// `-ln σ(x)` without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        libm::log1p(libm::exp(-x))
    } else {
        -x + libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Argument of the log-sigmoid: `-β/2 · (Δ_w − Δ_l)` where `Δ` is the
/// policy's squared error minus the reference's.
fn dpo_inner(inp: &DpoInputs, w: Selection<'_>, l: Selection<'_>) -> f64 {
    let dw = w.sq_err(&inp.eps_w, &inp.pred_theta_w) - w.sq_err(&inp.eps_w, &inp.pred_ref_w);
    let dl = l.sq_err(&inp.eps_l, &inp.pred_theta_l) - l.sq_err(&inp.eps_l, &inp.pred_ref_l);
    -inp.beta / 2.0 * (dw - dl)
}

/// The preference argument `a` for vanilla inputs, so that loss = `-ln σ(a)`.
pub fn dpo_margin(inp: &DpoInputs) -> Result<f64, LossError> {
    inp.validate()?;
    Ok(dpo_inner(inp, Selection::full(), Selection::full()))
}

/// Preference loss over the full utterance.
pub fn dpo_loss(inp: &DpoInputs) -> Result<f64, LossError> {
    Ok(neg_log_sigmoid(dpo_margin(inp)?))
}

/// Preference loss restricted to masked frames; each branch's squared error
/// is averaged over its own mask.
pub fn masked_dpo_loss(inp: &DpoInputs) -> Result<f64, LossError> {
    inp.validate()?;
    let (mw, ml) = inp.masks()?;
    Ok(neg_log_sigmoid(dpo_inner(
        inp,
        Selection::masked(mw),
        Selection::masked(ml),
    )))
}

/// Gradients with respect to the policy predictions of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoGrad {
    pub d_theta_w: Vec<f64>,
    pub d_theta_l: Vec<f64>,
}

fn dpo_grad_with(inp: &DpoInputs, w: Selection<'_>, l: Selection<'_>) -> DpoGrad {
    let a = dpo_inner(inp, w, l);
    // dL/da = -σ(-a)
    let s = sigmoid(-a);
    let d_theta_w = (0..inp.len())
        .map(|k| {
            if w.selects(k) {
                -s * inp.beta * w.scale * (inp.eps_w[k] - inp.pred_theta_w[k])
            } else {
                0.0
            }
        })
        .collect();
    let d_theta_l = (0..inp.len())
        .map(|k| {
            if l.selects(k) {
                s * inp.beta * l.scale * (inp.eps_l[k] - inp.pred_theta_l[k])
            } else {
                0.0
            }
        })
        .collect();
    DpoGrad {
        d_theta_w,
        d_theta_l,
    }
}

pub fn dpo_loss_grad(inp: &DpoInputs) -> Result<DpoGrad, LossError> {
    inp.validate()?;
    Ok(dpo_grad_with(inp, Selection::full(), Selection::full()))
}

pub fn masked_dpo_loss_grad(inp: &DpoInputs) -> Result<DpoGrad, LossError> {
    inp.validate()?;
    let (mw, ml) = inp.masks()?;
    Ok(dpo_grad_with(inp, Selection::masked(mw), Selection::masked(ml)))
}

/// A scalar objective over a flat parameter vector with a closed-form
/// gradient.
pub trait Differentiable {
    fn value(&self, x: &[f64]) -> Result<f64, LossError>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError>;
}

/// Largest relative discrepancy between the analytic gradient and central
/// finite differences. Entries where both magnitudes are below `1e-3` are
/// compared on an absolute scale of `1e-3`.
pub fn grad_check<F: Differentiable + ?Sized>(
    f: &F,
    x: &[f64],
    epsilon: f64,
) -> Result<f64, LossError> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(LossError::InvalidStep);
    }
    let analytic = f.gradient(x)?;
    same_len(analytic.len(), x.len())?;
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        probe[k] = x[k] + epsilon;
        let up = f.value(&probe)?;
        probe[k] = x[k] - epsilon;
        let down = f.value(&probe)?;
        probe[k] = x[k];
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic[k];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(LossError::NonFiniteValue);
        }
        let denom = a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Focal loss as a function of the frame probabilities.
pub struct FocalObjective<'a> {
    pub labels: &'a [bool],
    pub params: FocalParams,
}

impl Differentiable for FocalObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        focal_loss(x, self.labels, self.params.gamma, self.params.alpha)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        focal_loss_grad(x, self.labels, self.params.gamma, self.params.alpha)
    }
}

pub struct BceObjective<'a> {
    pub labels: &'a [bool],
}

impl Differentiable for BceObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        binary_cross_entropy(x, self.labels)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        binary_cross_entropy_grad(x, self.labels)
    }
}

/// MSE as a function of the predictions.
pub struct MseObjective<'a> {
    pub labels: &'a [f64],
}

impl Differentiable for MseObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        timestamp_mse(x, self.labels)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        timestamp_mse_grad(x, self.labels)
    }
}

/// Token cross-entropy as a function of the flattened distributions. The
/// sum-to-one check is skipped so that finite-difference probes stay legal.
pub struct TokenCeObjective<'a> {
    pub targets: &'a [usize],
    pub vocab: usize,
}

impl TokenCeObjective<'_> {
    fn split<'x>(&self, x: &'x [f64]) -> Result<Vec<&'x [f64]>, LossError> {
        same_len(x.len(), self.targets.len() * self.vocab)?;
        if self.targets.iter().any(|t| *t >= self.vocab) {
            return Err(LossError::IndexOutOfRange(0));
        }
        Ok(x.chunks(self.vocab).collect())
    }
}

impl Differentiable for TokenCeObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        let d = self.split(x)?;
        if d.is_empty() {
            return Err(LossError::EmptyInput);
        }
        Ok(token_ce_unchecked(&d, self.targets))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        let d = self.split(x)?;
        if d.is_empty() {
            return Err(LossError::EmptyInput);
        }
        Ok(token_ce_grad_unchecked(&d, self.targets))
    }
}

/// Composite objective over `[quality preds | frame probs | token dists]`.
pub struct CompositeObjective<'a> {
    pub quality_labels: &'a [f64],
    pub frame_labels: &'a [bool],
    pub focal: FocalParams,
    pub targets: &'a [usize],
    pub vocab: usize,
}

impl CompositeObjective<'_> {
    fn parts<'x>(&self, x: &'x [f64]) -> Result<(&'x [f64], &'x [f64], &'x [f64]), LossError> {
        let (a, b) = (self.quality_labels.len(), self.frame_labels.len());
        same_len(x.len(), a + b + self.targets.len() * self.vocab)?;
        Ok((&x[..a], &x[a..a + b], &x[a + b..]))
    }

    fn ce(&self) -> TokenCeObjective<'_> {
        TokenCeObjective {
            targets: self.targets,
            vocab: self.vocab,
        }
    }
}

impl Differentiable for CompositeObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        let (q, f, d) = self.parts(x)?;
        let b = total_loss(
            timestamp_mse(q, self.quality_labels)?,
            focal_loss(f, self.frame_labels, self.focal.gamma, self.focal.alpha)?,
            self.ce().value(d)?,
        )?;
        Ok(b.total)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        let (q, f, d) = self.parts(x)?;
        let mut g = timestamp_mse_grad(q, self.quality_labels)?;
        g.extend(focal_loss_grad(f, self.frame_labels, self.focal.gamma, self.focal.alpha)?);
        g.extend(self.ce().gradient(d)?);
        Ok(g)
    }
}

/// Preference loss as a function of one branch's policy prediction.
pub struct DpoObjective<'a> {
    pub inputs: &'a DpoInputs,
    pub wrt: Branch,
    pub masked: bool,
}

impl DpoObjective<'_> {
    fn with(&self, x: &[f64]) -> Result<DpoInputs, LossError> {
        same_len(x.len(), self.inputs.len())?;
        let mut inp = self.inputs.clone();
        match self.wrt {
            Branch::Winner => inp.pred_theta_w.copy_from_slice(x),
            Branch::Loser => inp.pred_theta_l.copy_from_slice(x),
        }
        Ok(inp)
    }
}

impl Differentiable for DpoObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        let inp = self.with(x)?;
        if self.masked {
            masked_dpo_loss(&inp)
        } else {
            dpo_loss(&inp)
        }
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        let inp = self.with(x)?;
        let g = if self.masked {
            masked_dpo_loss_grad(&inp)?
        } else {
            dpo_loss_grad(&inp)?
        };
        Ok(match self.wrt {
            Branch::Winner => g.d_theta_w,
            Branch::Loser => g.d_theta_l,
        })
    }
}

/// All-true mask of the given length.
pub fn full_mask(len: usize) -> Vec<bool> {
    vec![true; len]
}
