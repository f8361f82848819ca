//! Training objectives: uncertainty-weighted cross entropy and Dice,
//! calibration maps, their consistency penalty, and the combined objective.
//!
//! Shapes: predictions are `[1,H,W]` (or `[H,W]`), annotations and
//! uncertainty maps are `[M,H,W]`. The prediction broadcasts across sources.
//! Probabilities are clamped into `[EPS, 1-EPS]` before `log`, and every
//! denominator is clamped below at `EPS`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, AutodiffError, Tape, Tensor, Var, EPS};

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("at least one annotation source is required")]
    NoSources,
    #[error("step fraction {0} outside [0, 1]")]
    StepFraction(f64),
    #[error("{what}: expected [M,H,W] maps matching the prediction, got {shape:?}")]
    Shape {
        what: &'static str,
        shape: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Weights of the combined objective and the ramp of the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the uncertainty-weighted Dice term.
    pub lambda: f64,
    /// Plateau of the consistency-term ramp.
    pub alpha_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha_max: 1.0,
        }
    }
}

/// Steepness of the consistency ramp; `alpha(0) ≈ 0.0067`, `alpha(1) ≈ 0.9933`.
const RAMP_SLOPE: f64 = 10.0;

impl LossWeights {
    /// Sigmoid-shaped, nondecreasing ramp over the fraction of training done.
    pub fn alpha(&self, step_fraction: f64) -> f64 {
        let t = step_fraction.clamp(0.0, 1.0);
        self.alpha_max * sigmoid(RAMP_SLOPE * t - RAMP_SLOPE / 2.0)
    }
}

fn source_count(tape: &Tape, pred: Var, maps: Var, what: &'static str) -> Result<usize, LossError> {
    let sp = tape.shape(pred);
    let sm = tape.shape(maps).to_vec();
    let spatial_pred = &sp[sp.len().saturating_sub(2)..];
    if sm.len() != 3 || spatial_pred.len() != 2 || sm[1..] != *spatial_pred {
        return Err(LossError::Shape { what, shape: sm });
    }
    if sm[0] == 0 {
        return Err(LossError::NoSources);
    }
    Ok(sm[0])
}

/// Per-pixel binary cross entropy `-[y ln p + (1-y) ln(1-p)]`, broadcast over sources.
fn binary_ce(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, LossError> {
    let p = tape.clamp(pred, EPS, 1.0 - EPS);
    let q = tape.one_minus(p);
    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let not_y = tape.one_minus(target);
    let pos = tape.mul(target, log_p)?;
    let neg = tape.mul(not_y, log_q)?;
    let sum = tape.add(pos, neg)?;
    Ok(tape.neg(sum)?)
}

/// Unweighted mean cross entropy over pixels (and sources, if `target` has several).
pub fn cross_entropy(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, LossError> {
    let ce = binary_ce(tape, pred, target)?;
    Ok(tape.mean_all(ce))
}

/// `1/(N·M) Σ_m Σ_i [exp(-σ) CE(p_i, y_i^m) + σ/2]`.
pub fn weighted_ce(
    tape: &mut Tape,
    pred: Var,
    annotations: Var,
    sigma: Var,
) -> Result<Var, LossError> {
    source_count(tape, pred, annotations, "annotations")?;
    source_count(tape, pred, sigma, "sigma")?;
    let ce = binary_ce(tape, pred, annotations)?;
    let neg_sigma = tape.neg(sigma)?;
    let weight = tape.exp(neg_sigma)?;
    let weighted = tape.mul(weight, ce)?;
    let reg = tape.mul_scalar(sigma, 0.5);
    let terms = tape.add(weighted, reg)?;
    Ok(tape.mean_all(terms))
}

/// `Σ (p - y)² / (Σ p² + Σ y²)`.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, LossError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let num = tape.sum_all(sq);
    let p2 = tape.square(pred)?;
    let y2 = tape.square(target)?;
    let sp = tape.sum_all(p2);
    let sy = tape.sum_all(y2);
    let den = tape.add(sp, sy)?;
    let den = tape.clamp_min(den, EPS);
    Ok(tape.div(num, den)?)
}

/// `1/M Σ_m Σ_i [exp(-σ)(p - y^m)² / (Σ p² + Σ (y^m)²) + σ/(2N)]`.
pub fn weighted_dice(
    tape: &mut Tape,
    pred: Var,
    annotations: Var,
    sigma: Var,
) -> Result<Var, LossError> {
    let m = source_count(tape, pred, annotations, "annotations")?;
    source_count(tape, pred, sigma, "sigma")?;
    let shape = tape.shape(annotations).to_vec();
    let n = (shape[1] * shape[2]) as f64;

    let diff = tape.sub(pred, annotations)?;
    let sq = tape.square(diff)?;
    let neg_sigma = tape.neg(sigma)?;
    let weight = tape.exp(neg_sigma)?;
    let weighted = tape.mul(weight, sq)?;
    // per-source sums over pixels, [M]
    let num = tape.reduce_sum(weighted, &[1, 2])?;

    let p2 = tape.square(pred)?;
    let sp = tape.sum_all(p2);
    let y2 = tape.square(annotations)?;
    let sy = tape.reduce_sum(y2, &[1, 2])?;
    let den = tape.add(sy, sp)?;
    let den = tape.clamp_min(den, EPS);
    let ratio = tape.div(num, den)?;

    let sigma_sum = tape.reduce_sum(sigma, &[1, 2])?;
    let reg = tape.mul_scalar(sigma_sum, 1.0 / (2.0 * n));
    let per_source = tape.add(ratio, reg)?;
    let total = tape.sum_all(per_source);
    Ok(tape.mul_scalar(total, 1.0 / m as f64))
}

/// Calibration maps `s^m = |y^m - σ^m|` and their source mean `s*`, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationVars {
    /// `[M,H,W]`
    pub s: Var,
    /// `[H,W]`
    pub s_star: Var,
}

impl CalibrationVars {
    pub fn values(&self, tape: &Tape) -> CalibrationSet {
        CalibrationSet {
            s: tape.value(self.s).clone(),
            s_star: tape.value(self.s_star).clone(),
        }
    }
}

pub fn calibration_maps(
    tape: &mut Tape,
    annotations: Var,
    sigma: Var,
) -> Result<CalibrationVars, LossError> {
    let sa = tape.shape(annotations).to_vec();
    let ss = tape.shape(sigma).to_vec();
    if sa.len() != 3 || sa != ss {
        return Err(LossError::Shape {
            what: "sigma",
            shape: ss,
        });
    }
    if sa[0] == 0 {
        return Err(LossError::NoSources);
    }
    let diff = tape.sub(annotations, sigma)?;
    let s = tape.abs(diff)?;
    let s_star = tape.reduce_mean(s, &[0])?;
    Ok(CalibrationVars { s, s_star })
}

/// Calibration maps as plain values, the input of quality assessment.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    /// `[M,H,W]`
    pub s: Tensor,
    /// `[H,W]`
    pub s_star: Tensor,
}

impl CalibrationSet {
    /// Builds the maps directly from stacked calibration values `s[M,H,W]`.
    pub fn from_maps(s: Tensor) -> Result<Self, LossError> {
        let shape = s.shape().to_vec();
        if shape.len() != 3 || shape[0] == 0 {
            return Err(LossError::Shape {
                what: "calibration maps",
                shape,
            });
        }
        let mut tape = Tape::new();
        let sv = tape.leaf(s);
        let s_star = tape.reduce_mean(sv, &[0])?;
        Ok(Self {
            s: tape.value(sv).clone(),
            s_star: tape.value(s_star).clone(),
        })
    }

    /// `|y - σ|` evaluated outside any training graph.
    pub fn from_uncertainty(annotations: &Tensor, sigma: &Tensor) -> Result<Self, LossError> {
        let mut tape = Tape::new();
        let y = tape.leaf(annotations.clone());
        let s = tape.leaf(sigma.clone());
        Ok(calibration_maps(&mut tape, y, s)?.values(&tape))
    }

    pub fn num_sources(&self) -> usize {
        self.s.shape()[0]
    }
}

/// `1/(M·N) Σ_m Σ_i (s_i^m - s_i^*)²`.
pub fn consistency_loss(tape: &mut Tape, calib: &CalibrationVars) -> Result<Var, LossError> {
    let diff = tape.sub(calib.s, calib.s_star)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean_all(sq))
}

/// Components of the combined objective for one prediction.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub weighted_ce: Var,
    pub weighted_dice: Var,
    pub consistency: Var,
    pub alpha: f64,
    pub calibration: CalibrationVars,
}

/// `L_WCE + λ L_WDice + α(t) L_C`.
pub fn total_loss(
    tape: &mut Tape,
    pred: Var,
    annotations: Var,
    sigma: Var,
    weights: &LossWeights,
    step_fraction: f64,
) -> Result<LossTerms, LossError> {
    if !(0.0..=1.0).contains(&step_fraction) {
        return Err(LossError::StepFraction(step_fraction));
    }
    let wce = weighted_ce(tape, pred, annotations, sigma)?;
    let wdice = weighted_dice(tape, pred, annotations, sigma)?;
    let calibration = calibration_maps(tape, annotations, sigma)?;
    let consistency = consistency_loss(tape, &calibration)?;
    let alpha = weights.alpha(step_fraction);
    let dice_part = tape.mul_scalar(wdice, weights.lambda);
    let c_part = tape.mul_scalar(consistency, alpha);
    let total = tape.add(wce, dice_part)?;
    let total = tape.add(total, c_part)?;
    Ok(LossTerms {
        total,
        weighted_ce: wce,
        weighted_dice: wdice,
        consistency,
        alpha,
        calibration,
    })
}

/// `CE + λ Dice` against a single fused target, used by the majority-vote baseline.
pub fn fused_target_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    lambda: f64,
) -> Result<(Var, Var, Var), LossError> {
    let ce = cross_entropy(tape, pred, target)?;
    let dice = dice_loss(tape, pred, target)?;
    let scaled = tape.mul_scalar(dice, lambda);
    let total = tape.add(ce, scaled)?;
    Ok((total, ce, dice))
}

#[cfg(test)]
#[path = "losses_tests.rs"]
mod tests;
