//! Finite-difference audit of the analytic gradients of every loss term with
//! respect to every parameter of both networks.

use super::TrainError;
use crate::autodiff::gradcheck::{relative_error, FD_STEP};
use crate::autodiff::{Tape, Tensor, Var};
use crate::losses::{
    calibration_maps, consistency_loss, total_loss, weighted_ce, weighted_dice, LossError,
    LossWeights,
};
use crate::models::{Auem, Binding, Heads, SegNet};

/// Scalar objectives audited by [`check_model_gradients`], in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    WeightedCe,
    WeightedDice,
    Consistency,
    Total,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::WeightedCe,
        Objective::WeightedDice,
        Objective::Consistency,
        Objective::Total,
    ];
}

/// Largest deviation found for one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub objective: Objective,
    pub max_relative_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar parameters compared.
    pub checked: usize,
}

/// One model instance and the loss settings it is audited under.
#[derive(Debug, Clone)]
pub struct GradCheckCase<'a> {
    pub seg: &'a SegNet,
    pub auem: &'a Auem,
    pub image: &'a Tensor,
    pub annotations: &'a Tensor,
    /// `Primary` or `Auxiliary`.
    pub head: Heads,
    pub weights: LossWeights,
    pub step_fraction: f64,
}

struct Evaluated {
    tape: Tape,
    losses: [Var; 4],
    seg: Binding,
    auem: Binding,
}

fn evaluate(case: &GradCheckCase, seg: &SegNet, auem: &Auem) -> Result<Evaluated, TrainError> {
    let mut tape = Tape::new();
    let mut bs = Binding::new();
    let mut ba = Binding::new();
    let x = tape.leaf(case.image.clone());
    let y = tape.leaf(case.annotations.clone());
    let sigma = auem.forward(&mut tape, &mut ba, x, y)?;
    let out = seg.forward(&mut tape, &mut bs, x, case.head)?;
    let pred = out
        .primary_prob
        .or(out.auxiliary_prob)
        .expect("one head requested");
    let wce = weighted_ce(&mut tape, pred, y, sigma)?;
    let wdice = weighted_dice(&mut tape, pred, y, sigma)?;
    let calib = calibration_maps(&mut tape, y, sigma)?;
    let lc = consistency_loss(&mut tape, &calib)?;
    let total = total_loss(&mut tape, pred, y, sigma, &case.weights, case.step_fraction)?.total;
    Ok(Evaluated {
        tape,
        losses: [wce, wdice, lc, total],
        seg: bs,
        auem: ba,
    })
}

fn values(case: &GradCheckCase, seg: &SegNet, auem: &Auem) -> [f64; 4] {
    let e = evaluate(case, seg, auem).expect("objective evaluates");
    e.losses.map(|l| e.tape.value(l).item())
}

/// Compares backward gradients with central differences (step [`FD_STEP`])
/// on every scalar of both parameter stores, for each [`Objective`].
/// Relative errors use `floor` as the smallest denominator.
pub fn check_model_gradients(
    case: &GradCheckCase,
    floor: f64,
) -> Result<Vec<GradCheckReport>, TrainError> {
    if case.head == Heads::Both {
        return Err(TrainError::Config(
            "gradient check needs a single head".into(),
        ));
    }
    let e = evaluate(case, case.seg, case.auem)?;
    // analytic[objective][net] gradients aligned with each parameter store
    let mut analytic = Vec::with_capacity(4);
    for &loss in &e.losses {
        let g = e.tape.backward(loss).map_err(LossError::from)?;
        analytic.push([
            e.seg.gradients(case.seg.params(), &g),
            e.auem.gradients(case.auem.params(), &g),
        ]);
    }

    let mut reports: Vec<GradCheckReport> = Objective::ALL
        .iter()
        .map(|&objective| GradCheckReport {
            objective,
            max_relative_error: 0.0,
            worst: String::new(),
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        })
        .collect();
    let mut seg = case.seg.clone();
    let mut auem = case.auem.clone();
    for net in 0..2 {
        let names = if net == 0 {
            case.seg.params().names().to_vec()
        } else {
            case.auem.params().names().to_vec()
        };
        for (p, name) in names.iter().enumerate() {
            let len = if net == 0 {
                case.seg.params().tensor_at(p).len()
            } else {
                case.auem.params().tensor_at(p).len()
            };
            for i in 0..len {
                let nudge = |seg: &mut SegNet, auem: &mut Auem, delta: f64| {
                    let t = if net == 0 {
                        seg.params_mut().tensor_at_mut(p)
                    } else {
                        auem.params_mut().tensor_at_mut(p)
                    };
                    t.data_mut()[i] += delta;
                };
                nudge(&mut seg, &mut auem, FD_STEP);
                let plus = values(case, &seg, &auem);
                nudge(&mut seg, &mut auem, -2.0 * FD_STEP);
                let minus = values(case, &seg, &auem);
                let orig = if net == 0 {
                    case.seg.params().tensor_at(p).data()[i]
                } else {
                    case.auem.params().tensor_at(p).data()[i]
                };
                let restored = if net == 0 {
                    seg.params_mut().tensor_at_mut(p)
                } else {
                    auem.params_mut().tensor_at_mut(p)
                };
                restored.data_mut()[i] = orig;
                for (k, r) in reports.iter_mut().enumerate() {
                    let numeric = (plus[k] - minus[k]) / (2.0 * FD_STEP);
                    let a = analytic[k][net].get(p).map_or(0.0, |g| g.data()[i]);
                    let err = relative_error(a, numeric, floor);
                    r.checked += 1;
                    if err > r.max_relative_error || r.worst.is_empty() {
                        r.max_relative_error = err;
                        r.worst = format!("{name}[{i}]");
                        r.analytic = a;
                        r.numeric = numeric;
                    }
                }
            }
        }
    }
    Ok(reports)
}
