//! Sample-splitting estimators with distribution-free (DKW) confidence
//! intervals that hold in finite samples for any adjuster.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cross_fit::{fit_adjusters_on, AdjusterPlan};
use crate::ecdf::{inf_delta, sup_delta, DeltaCurve, WeightMode};
use crate::error::{Error, Result};
use crate::model::Sample;
use crate::rng;

/// Partition into an auxiliary part (for fitting adjusters) and a main part
/// (for the bounds), stratified by arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub aux_fraction: f64,
    pub main: Vec<usize>,
    pub aux: Vec<usize>,
}

pub const DEFAULT_AUX_FRACTION: f64 = 0.5;

impl SplitPlan {
    /// Random split placing `round(aux_fraction * n_j)` units of each arm in
    /// the auxiliary part.
    pub fn random(sample: &Sample, aux_fraction: f64, seed: u64) -> Result<Self> {
        if !(aux_fraction > 0.0 && aux_fraction < 1.0) {
            return Err(Error::config(format!("aux_fraction = {aux_fraction} must lie in (0, 1)")));
        }
        let mut main = Vec::new();
        let mut aux = Vec::new();
        for (label, mut idx) in [(1u64, sample.treated_indices()), (0, sample.control_indices())] {
            idx.shuffle(&mut rng::stream(seed, &[0x5B17, label]));
            let k = ((aux_fraction * idx.len() as f64).round() as usize).min(idx.len().saturating_sub(1));
            aux.extend_from_slice(&idx[..k]);
            main.extend_from_slice(&idx[k..]);
        }
        main.sort_unstable();
        aux.sort_unstable();
        Self::new(sample, aux_fraction, main, aux)
    }

    pub fn new(sample: &Sample, aux_fraction: f64, main: Vec<usize>, aux: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; sample.len()];
        for &i in main.iter().chain(&aux) {
            if i >= sample.len() || seen[i] {
                return Err(Error::config("split plan is not a partition of the sample"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("split plan leaves units unassigned"));
        }
        let (t, c) = counts(sample, &main);
        if t == 0 || c == 0 {
            return Err(Error::degenerate(format!("main sample has {t} treated and {c} control units")));
        }
        Ok(SplitPlan { aux_fraction, main, aux })
    }
}

fn counts(sample: &Sample, idx: &[usize]) -> (usize, usize) {
    let t = idx.iter().filter(|&&i| sample.treated(i)).count();
    (t, idx.len() - t)
}

/// `sqrt(log(2 / alpha) / 2) * (n1^{-1/2} + n0^{-1/2})`.
pub fn dkw_critical(alpha: f64, n1_main: usize, n0_main: usize) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    if n1_main == 0 || n0_main == 0 {
        return Err(Error::degenerate("DKW critical value needs both main arms"));
    }
    Ok(((2.0 / alpha).ln() / 2.0).sqrt() * (1.0 / (n1_main as f64).sqrt() + 1.0 / (n0_main as f64).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEstimate {
    pub theta_l: f64,
    pub theta_u: f64,
    pub t_l: Option<f64>,
    pub t_u: Option<f64>,
    pub alpha: f64,
    pub c_alpha: f64,
    pub c_alpha_half: f64,
    pub n1_main: usize,
    pub n0_main: usize,
    pub aux_fraction: f64,
    /// `[theta_L - c_alpha, 1]`, clipped.
    pub lower_ci: (f64, f64),
    /// `[0, theta_U + c_alpha]`, clipped.
    pub upper_ci: (f64, f64),
    /// `[theta_L - c_{alpha/2}, theta_U + c_{alpha/2}]`, clipped; `None`
    /// when the unclipped endpoints cross.
    pub two_sided: Option<(f64, f64)>,
    pub crossed: bool,
    pub model_l: String,
    pub model_u: String,
    pub warnings: Vec<String>,
}

/// Fits adjusters on the auxiliary part and evaluates the bounds and DKW
/// intervals on the main part.
pub fn estimate_split(
    sample: &Sample,
    plan: &SplitPlan,
    adjusters: &AdjusterPlan,
    alpha: f64,
    seed: u64,
) -> Result<SplitEstimate> {
    let (n1, n0) = counts(sample, &plan.main);
    let c_alpha = dkw_critical(alpha, n1, n0)?;
    let c_alpha_half = dkw_critical(alpha / 2.0, n1, n0)?;
    let fit = fit_adjusters_on(sample, &plan.aux, &plan.main, adjusters, seed)?;
    let d: Vec<bool> = plan.main.iter().map(|&i| sample.treated(i)).collect();
    let z = |s: &[f64]| -> Vec<f64> { plan.main.iter().zip(s).map(|(&i, s)| sample.y()[i] - s).collect() };
    let lo = sup_delta(&DeltaCurve::from_adjusted(&z(&fit.lower), &d, WeightMode::ArmShare)?);
    let hi = inf_delta(&DeltaCurve::from_adjusted(&z(&fit.upper), &d, WeightMode::ArmShare)?);
    let (theta_l, theta_u) = (lo.value, 1.0 + hi.value);
    let clip = |v: f64| v.clamp(0.0, 1.0);
    let (a, b) = (theta_l - c_alpha_half, theta_u + c_alpha_half);
    Ok(SplitEstimate {
        theta_l,
        theta_u,
        t_l: (!lo.is_sentinel()).then_some(lo.t),
        t_u: (!hi.is_sentinel()).then_some(hi.t),
        alpha,
        c_alpha,
        c_alpha_half,
        n1_main: n1,
        n0_main: n0,
        aux_fraction: plan.aux_fraction,
        lower_ci: (clip(theta_l - c_alpha), 1.0),
        upper_ci: (0.0, clip(theta_u + c_alpha)),
        two_sided: (a <= b).then(|| (clip(a), clip(b))),
        crossed: theta_l - c_alpha > theta_u + c_alpha,
        model_l: fit.model_l,
        model_u: fit.model_u,
        warnings: fit.warnings,
    })
}
