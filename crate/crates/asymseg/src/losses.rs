//! Similarity losses for unbalanced binary segmentation, with analytic
//! per-voxel gradients.
//!
//! The central loss is an asymmetric overlap score F_beta, a special case
//! of the Tversky index in which the weights on false negatives and false
//! positives sum to one: beta^2/(1+beta^2) on FN and 1/(1+beta^2) on FP.
//! beta > 1 weighs recall over precision, beta = 1 is the soft Dice score.
//! The loss minimized in training is `1 - F_beta`.
//!
//! Two comparison losses are included: generalized Dice (two classes,
//! squared-reciprocal class-volume weights) and focal loss (cross-entropy
//! modulated by `(1 - p_t)^gamma` with class weight alpha).
//!
//! Gradients are the exact quotient-rule derivatives of the computed
//! values. Note that taking the quotient rule only through the numerator
//! and FN terms (so that the gradient vanishes wherever `g_j = 0`) does
//! not agree with finite differences; the full derivative used here does.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume::{check_dims_match, Dims, Mask, ProbabilityMap};

/// Probabilities are pulled away from {0, 1} by this margin before the
/// focal-loss logarithm.
pub const FOCAL_CLAMP_EPS: f64 = 1e-7;

/// A fully parameterized loss choice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    FBeta { beta: f64 },
    Gdl,
    Focal { alpha: f64, gamma: f64 },
}

impl LossSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::FBeta { beta } => {
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(Error::invalid("beta", format!("{beta} must be positive")));
                }
            }
            LossSpec::Gdl => {}
            LossSpec::Focal { alpha, gamma } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::invalid("alpha", format!("{alpha} outside [0, 1]")));
                }
                if !(gamma.is_finite() && gamma >= 0.0) {
                    return Err(Error::invalid("gamma", format!("{gamma} must be >= 0")));
                }
            }
        }
        Ok(())
    }

    /// Weight on the false-negative term, `beta^2 / (1 + beta^2)`.
    pub fn fn_weight(&self) -> Option<f64> {
        match *self {
            LossSpec::FBeta { beta } => Some(beta * beta / (1.0 + beta * beta)),
            _ => None,
        }
    }

    /// Weight on the false-positive term, `1 / (1 + beta^2)`.
    pub fn fp_weight(&self) -> Option<f64> {
        match *self {
            LossSpec::FBeta { beta } => Some(1.0 / (1.0 + beta * beta)),
            _ => None,
        }
    }

    pub fn evaluate(&self, p: &ProbabilityMap, g: &Mask) -> Result<LossResult> {
        self.validate()?;
        match *self {
            LossSpec::FBeta { beta } => f_beta_loss_with_grad(p, g, beta),
            LossSpec::Gdl => gdl_loss_with_grad(p, g),
            LossSpec::Focal { alpha, gamma } => focal_loss_with_grad(p, g, alpha, gamma),
        }
    }
}

impl std::fmt::Display for LossSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossSpec::FBeta { beta } => write!(f, "f_beta(beta={beta})"),
            LossSpec::Gdl => write!(f, "gdl"),
            LossSpec::Focal { alpha, gamma } => write!(f, "focal(alpha={alpha}, gamma={gamma})"),
        }
    }
}

/// Scalar loss value plus its gradient with respect to every voxel of the
/// prediction.
#[derive(Clone, Debug)]
pub struct LossResult {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub dims: Dims,
}

impl LossResult {
    fn new(value: f64, gradient: Vec<f64>, dims: Dims) -> Result<Self> {
        debug_assert_eq!(gradient.len(), dims.voxel_count());
        if !value.is_finite() {
            return Err(Error::Internal(format!("non-finite loss value {value}")));
        }
        if gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::Internal("non-finite loss gradient".into()));
        }
        Ok(LossResult {
            value,
            gradient,
            dims,
        })
    }
}

/// Overlap term sums: (sum p*g, sum (1-p)*g, sum p*(1-g)).
fn overlap_sums(p: &[f64], g: &[u8]) -> (f64, f64, f64) {
    let parts = par::partials(p.len(), |r| {
        let mut tp = 0.0;
        let mut fn_ = 0.0;
        let mut fp = 0.0;
        for i in r {
            let pi = p[i];
            if g[i] == 1 {
                tp += pi;
                fn_ += 1.0 - pi;
            } else {
                fp += pi;
            }
        }
        (tp, fn_, fp)
    });
    parts.into_iter().fold((0.0, 0.0, 0.0), |acc, t| {
        (acc.0 + t.0, acc.1 + t.1, acc.2 + t.2)
    })
}

fn check_inputs(p: &ProbabilityMap, g: &Mask) -> Result<()> {
    check_dims_match(p.dims(), g.dims())
}

/// Asymmetric overlap score
/// `(1+b^2) TP / ((1+b^2) TP + b^2 FN + FP)` on soft predictions, where
/// `TP = sum p_i g_i`, `FN = sum (1-p_i) g_i`, `FP = sum p_i (1-g_i)`.
///
/// At `beta = 1` this is exactly the soft Dice coefficient
/// `2 sum(p g) / (sum p + sum g)`.
pub fn f_beta_score(p: &ProbabilityMap, g: &Mask, beta: f64) -> Result<f64> {
    check_inputs(p, g)?;
    LossSpec::FBeta { beta }.validate()?;
    let (tp, fn_, fp) = overlap_sums(p.data(), g.data());
    if tp + fn_ + fp == 0.0 {
        // g all zero and p all zero: upstream patch selection guarantees
        // this never happens, so surface it loudly.
        return Err(Error::DoublyEmpty);
    }
    let b2 = beta * beta;
    Ok((1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * fn_ + fp))
}

/// Loss `1 - F_beta` and its exact gradient.
///
/// With `N = (1+b^2) TP` and `D = (1+b^2) TP + b^2 FN + FP`, the score is
/// `N/D`, `dN/dp_j = (1+b^2) g_j`, and `dD/dp_j = 1` for binary `g`, so
/// `d(loss)/dp_j = (N - (1+b^2) g_j D) / D^2`. On background voxels this
/// reduces to `N / D^2 >= 0`: raising a false positive always hurts.
pub fn f_beta_loss_with_grad(p: &ProbabilityMap, g: &Mask, beta: f64) -> Result<LossResult> {
    check_inputs(p, g)?;
    LossSpec::FBeta { beta }.validate()?;
    let (tp, fn_, fp) = overlap_sums(p.data(), g.data());
    if tp + fn_ + fp == 0.0 {
        return Err(Error::DoublyEmpty);
    }
    let b2 = beta * beta;
    let num = (1.0 + b2) * tp;
    let den = (1.0 + b2) * tp + b2 * fn_ + fp;
    let den2 = den * den;

    let gd = g.data();
    let mut gradient = vec![0.0; p.data().len()];
    par::fill_chunks(&mut gradient, |start, out| {
        for (k, slot) in out.iter_mut().enumerate() {
            let gj = f64::from(gd[start + k]);
            *slot = (num - (1.0 + b2) * gj * den) / den2;
        }
    });
    LossResult::new(1.0 - num / den, gradient, p.dims())
}

/// Generalized Dice loss over the two classes {lesion, background} with
/// weights `w_l = 1 / (sum_i g_li)^2`, and its exact gradient. The
/// background probability is `1 - p`. Errors if either class is absent
/// from the ground truth (its weight would be undefined).
pub fn gdl_loss_with_grad(p: &ProbabilityMap, g: &Mask) -> Result<LossResult> {
    check_inputs(p, g)?;
    let n = p.data().len();
    let lesion = g.lesion_voxels();
    if lesion == 0 || lesion == n {
        return Err(Error::MissingClass);
    }
    let pd = p.data();
    let (tp, _, fp) = overlap_sums(pd, g.data());
    let sum_p = par::sum_f64(n, |r| r.map(|i| pd[i]).sum());

    let g_lesion = lesion as f64;
    let g_bg = (n - lesion) as f64;
    let w_l = 1.0 / (g_lesion * g_lesion);
    let w_b = 1.0 / (g_bg * g_bg);

    // Per-class intersection and size sums.
    let inter_l = tp;
    let inter_b = g_bg - fp; // sum (1-p)(1-g) = |B| - sum p(1-g)
    let size_l = sum_p + g_lesion;
    let size_b = (n as f64 - sum_p) + g_bg;

    let num = w_l * inter_l + w_b * inter_b;
    let den = w_l * size_l + w_b * size_b;
    let value = 1.0 - 2.0 * num / den;

    // d(num)/dp_j = w_l g_j - w_b (1-g_j); d(den)/dp_j = w_l - w_b.
    let dden = w_l - w_b;
    let den2 = den * den;
    let gd = g.data();
    let mut gradient = vec![0.0; n];
    par::fill_chunks(&mut gradient, |start, out| {
        for (k, slot) in out.iter_mut().enumerate() {
            let gj = f64::from(gd[start + k]);
            let dnum = w_l * gj - w_b * (1.0 - gj);
            *slot = -2.0 * (dnum * den - num * dden) / den2;
        }
    });
    LossResult::new(value, gradient, p.dims())
}

/// Focal loss, mean over voxels of `-alpha_t (1 - p_t)^gamma ln(p_t)`
/// with `p_t = p` on lesion voxels and `1 - p` on background, and its
/// exact gradient. Probabilities are clamped to
/// `[FOCAL_CLAMP_EPS, 1 - FOCAL_CLAMP_EPS]` before the logarithm.
pub fn focal_loss_with_grad(
    p: &ProbabilityMap,
    g: &Mask,
    alpha: f64,
    gamma: f64,
) -> Result<LossResult> {
    check_inputs(p, g)?;
    LossSpec::Focal { alpha, gamma }.validate()?;
    let n = p.data().len();
    let inv_n = 1.0 / n as f64;
    let pd = p.data();
    let gd = g.data();

    let per_voxel = |i: usize| -> (f64, f64) {
        let lesion = gd[i] == 1;
        let pt = if lesion { pd[i] } else { 1.0 - pd[i] };
        let pt = pt.clamp(FOCAL_CLAMP_EPS, 1.0 - FOCAL_CLAMP_EPS);
        let at = if lesion { alpha } else { 1.0 - alpha };
        let one_minus = 1.0 - pt;
        let modulator = one_minus.powf(gamma);
        let value = -at * modulator * pt.ln();
        // d/dp_t of -a (1-p_t)^gamma ln(p_t); gamma = 0 kills the first term.
        let mut d = -modulator / pt;
        if gamma > 0.0 {
            d += gamma * one_minus.powf(gamma - 1.0) * pt.ln();
        }
        d *= at;
        let sign = if lesion { 1.0 } else { -1.0 };
        (value, sign * d)
    };

    let value = par::sum_f64(n, |r| r.map(|i| per_voxel(i).0).sum()) * inv_n;
    let mut gradient = vec![0.0; n];
    par::fill_chunks(&mut gradient, |start, out| {
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = per_voxel(start + k).1 * inv_n;
        }
    });
    LossResult::new(value, gradient, p.dims())
}
