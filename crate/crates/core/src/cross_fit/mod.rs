//! Cross-fitted bound estimators, their variance estimates and confidence
//! intervals.

mod stoye;
mod variants;

pub use stoye::{stoye_ci, stoye_critical_values, HRule, StoyeInterval};
pub use variants::{
    fold_t_from_parts, group_propensity_bounds, known_propensity_bounds, sjls_estimate,
    variant_fold_t, variant_group_propensity, variant_known_propensity, SjlsEstimate,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cond_cdf::{extract_adjusters, select_model, GridSpec, ModelFactory, ModelSpec, Side};
use crate::ecdf::{inf_delta, sup_delta, DeltaCurve, Extremum, WeightMode};
use crate::error::{Error, Result};
use crate::model::{FoldPlan, Sample};
use crate::normal::{norm_cdf, z_upper};
use crate::rng;

/// Point estimates of the lower and upper bounds with their optimizers and
/// variance estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsEstimate {
    pub theta_l: f64,
    pub theta_u: f64,
    /// Unclipped values; differ from `theta_*` only for estimators that can
    /// leave `[0, 1]`.
    pub raw_l: f64,
    pub raw_u: f64,
    /// Optimizer locations; `None` when the optimum is 0 and only reached
    /// off the data.
    pub t_l: Option<f64>,
    pub t_u: Option<f64>,
    pub sigma2_l: f64,
    pub sigma2_u: f64,
    pub sigma_lu: f64,
    pub pi_hat: f64,
}

impl BoundsEstimate {
    pub fn new(lo: Extremum, hi: Extremum, var: &Variance, pi_hat: f64) -> Self {
        let opt = |e: Extremum| (!e.is_sentinel()).then_some(e.t);
        Self::from_raw(lo.value, 1.0 + hi.value, opt(lo), opt(hi), var, pi_hat)
    }

    pub fn from_raw(
        raw_l: f64,
        raw_u: f64,
        t_l: Option<f64>,
        t_u: Option<f64>,
        var: &Variance,
        pi_hat: f64,
    ) -> Self {
        BoundsEstimate {
            theta_l: raw_l.clamp(0.0, 1.0),
            theta_u: raw_u.clamp(0.0, 1.0),
            raw_l,
            raw_u,
            t_l,
            t_u,
            sigma2_l: var.sigma2_l,
            sigma2_u: var.sigma2_u,
            sigma_lu: var.sigma_lu,
            pi_hat,
        }
    }

    pub fn sigma_l(&self) -> f64 {
        self.sigma2_l.sqrt()
    }

    pub fn sigma_u(&self) -> f64 {
        self.sigma2_u.sqrt()
    }
}

/// Variance triple plus notes on arms whose indicators never vary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Variance {
    pub sigma2_l: f64,
    pub sigma2_u: f64,
    pub sigma_lu: f64,
    pub constant_arms: Vec<String>,
}

/// Arm-wise moments of two indicator vectors.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct ArmMoments {
    pub n: usize,
    pub m_l: f64,
    pub m_u: f64,
    pub m_lu: f64,
}

impl ArmMoments {
    pub(crate) fn collect(idx: impl Iterator<Item = usize>, il: &[bool], iu: &[bool]) -> Self {
        let (mut n, mut a, mut b, mut c) = (0usize, 0usize, 0usize, 0usize);
        for i in idx {
            n += 1;
            a += usize::from(il[i]);
            b += usize::from(iu[i]);
            c += usize::from(il[i] && iu[i]);
        }
        let nf = n as f64;
        ArmMoments { n, m_l: a as f64 / nf, m_u: b as f64 / nf, m_lu: c as f64 / nf }
    }

    pub(crate) fn var_l(&self) -> f64 {
        self.m_l - self.m_l * self.m_l
    }

    pub(crate) fn var_u(&self) -> f64 {
        self.m_u - self.m_u * self.m_u
    }

    pub(crate) fn cov(&self) -> f64 {
        self.m_lu - self.m_l * self.m_u
    }
}

/// `sigma^2_A = sigma^2_{A,1} / pi + sigma^2_{A,0} / (1 - pi)` and the
/// matching covariance, from per-unit indicators at the optimizers.
pub fn variance_from_indicators(d: &[bool], il: &[bool], iu: &[bool]) -> Variance {
    let n = d.len();
    let m1 = ArmMoments::collect((0..n).filter(|&i| d[i]), il, iu);
    let m0 = ArmMoments::collect((0..n).filter(|&i| !d[i]), il, iu);
    let pi = m1.n as f64 / n as f64;
    let mut constant_arms = Vec::new();
    for (arm, m) in [("treated", &m1), ("control", &m0)] {
        if m.var_l() == 0.0 {
            constant_arms.push(format!("{arm} lower-bound indicators"));
        }
        if m.var_u() == 0.0 {
            constant_arms.push(format!("{arm} upper-bound indicators"));
        }
    }
    Variance {
        sigma2_l: m1.var_l() / pi + m0.var_l() / (1.0 - pi),
        sigma2_u: m1.var_u() / pi + m0.var_u() / (1.0 - pi),
        sigma_lu: m1.cov() / pi + m0.cov() / (1.0 - pi),
        constant_arms,
    }
}

/// Variance triple at optimizers `t_l`, `t_u` (`-inf` for the sentinel) with
/// per-unit adjusters.
pub fn variance_hat(sample: &Sample, s_l: &[f64], s_u: &[f64], t_l: f64, t_u: f64) -> Variance {
    let y = sample.y();
    let il: Vec<bool> = y.iter().zip(s_l).map(|(y, s)| y - s <= t_l).collect();
    let iu: Vec<bool> = y.iter().zip(s_u).map(|(y, s)| y - s <= t_u).collect();
    variance_from_indicators(sample.d(), &il, &iu)
}

/// Candidate learners, the argmax grid and the inner CV depth used when more
/// than one candidate is given.
#[derive(Clone)]
pub struct Learner {
    pub candidates: Vec<Arc<dyn ModelFactory>>,
    pub grid: GridSpec,
    pub cv_folds: usize,
}

impl Learner {
    pub fn new(specs: &[ModelSpec]) -> Self {
        Learner {
            candidates: specs.iter().map(|s| Arc::new(s.clone()) as Arc<dyn ModelFactory>).collect(),
            grid: GridSpec::default(),
            cv_folds: 5,
        }
    }
}

/// Where adjusters come from.
#[derive(Clone)]
pub enum AdjusterPlan {
    /// `s = 0`.
    Zero,
    /// Given per-unit values (for oracle or externally fitted adjusters).
    Fixed { lower: Vec<f64>, upper: Vec<f64> },
    /// Fitted on training data only.
    Learned(Learner),
}

/// Adjuster values for a set of evaluation units.
#[derive(Clone, Debug, Default)]
pub struct AdjusterFit {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub model_l: String,
    pub model_u: String,
    pub warnings: Vec<String>,
}

/// Fits the plan on `train` units and evaluates adjusters at `eval` units.
pub fn fit_adjusters_on(
    sample: &Sample,
    train: &[usize],
    eval: &[usize],
    plan: &AdjusterPlan,
    seed: u64,
) -> Result<AdjusterFit> {
    match plan {
        AdjusterPlan::Zero => Ok(AdjusterFit {
            lower: vec![0.0; eval.len()],
            upper: vec![0.0; eval.len()],
            model_l: "zero".into(),
            model_u: "zero".into(),
            warnings: vec![],
        }),
        AdjusterPlan::Fixed { lower, upper } => {
            if lower.len() != sample.len() || upper.len() != sample.len() {
                return Err(Error::config(format!(
                    "adjuster files have {} and {} values for {} units",
                    lower.len(),
                    upper.len(),
                    sample.len()
                )));
            }
            Ok(AdjusterFit {
                lower: eval.iter().map(|&i| lower[i]).collect(),
                upper: eval.iter().map(|&i| upper[i]).collect(),
                model_l: "fixed".into(),
                model_u: "fixed".into(),
                warnings: vec![],
            })
        }
        AdjusterPlan::Learned(learner) => fit_learned(sample, train, eval, learner, seed),
    }
}

fn fit_learned(
    sample: &Sample,
    train: &[usize],
    eval: &[usize],
    learner: &Learner,
    seed: u64,
) -> Result<AdjusterFit> {
    if learner.candidates.is_empty() {
        return Err(Error::config("no candidate models"));
    }
    let train_sample = sample.subset(train)?;
    let mut warnings = Vec::new();
    let pick = |side: Side, warnings: &mut Vec<String>| -> Arc<dyn ModelFactory> {
        if learner.candidates.len() == 1 {
            return learner.candidates[0].clone();
        }
        let sel = select_model(
            &learner.candidates,
            &train_sample,
            side,
            learner.cv_folds,
            &learner.grid,
            rng::derive_seed(seed, &[0x5E1, side as u64]),
        );
        warnings.extend(sel.warnings);
        sel.model
    };
    let spec_l = pick(Side::Lower, &mut warnings);
    let spec_u = pick(Side::Upper, &mut warnings);

    let eval_data = sample.arm_data(eval);
    let treated = train_sample.treated_indices();
    let control = train_sample.control_indices();
    let grid = learner.grid.draw(train_sample.y_lo(), train_sample.y_hi(), rng::derive_seed(seed, &[0x6D]))?;

    let mut cache: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for spec in [&spec_l, &spec_u] {
        let name = spec.name();
        if cache.contains_key(&name) {
            continue;
        }
        let pair = if spec.zero_adjuster() {
            (vec![0.0; eval.len()], vec![0.0; eval.len()])
        } else {
            let f1 = spec.fit(&train_sample.arm_data(&treated), rng::derive_seed(seed, &[1]))?;
            let f0 = spec.fit(&train_sample.arm_data(&control), rng::derive_seed(seed, &[0]))?;
            warnings.extend(f1.warnings.into_iter().map(|w| format!("treated arm: {w}")));
            warnings.extend(f0.warnings.into_iter().map(|w| format!("control arm: {w}")));
            extract_adjusters(f1.model.as_ref(), f0.model.as_ref(), &eval_data, &grid)?
        };
        cache.insert(name, pair);
    }
    Ok(AdjusterFit {
        lower: cache[&spec_l.name()].0.clone(),
        upper: cache[&spec_u.name()].1.clone(),
        model_l: spec_l.name(),
        model_u: spec_u.name(),
        warnings,
    })
}

/// Summary of one fold's adjusters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldInfo {
    pub fold: usize,
    pub model_l: String,
    pub model_u: String,
    pub mean_l: f64,
    pub sd_l: f64,
    pub mean_u: f64,
    pub sd_u: f64,
    pub warnings: Vec<String>,
}

/// Cross-fitted adjusters: every unit's value comes from models trained
/// without its fold.
#[derive(Clone, Debug)]
pub struct FoldAdjusters {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub folds: Vec<FoldInfo>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    (m, s)
}

pub(crate) fn fold_seed(seed: u64, fold: usize) -> u64 {
    rng::derive_seed(seed, &[0xC0F, fold as u64])
}

/// Fits adjusters out-of-fold for every fold and assembles per-unit values.
pub fn fit_fold_adjusters(
    sample: &Sample,
    folds: &FoldPlan,
    plan: &AdjusterPlan,
    seed: u64,
) -> Result<FoldAdjusters> {
    if folds.fold_of().len() != sample.len() {
        return Err(Error::config("fold plan does not match the sample"));
    }
    let fits: Vec<(Vec<usize>, Result<AdjusterFit>)> = (0..folds.k())
        .into_par_iter()
        .map(|k| {
            let inside = folds.in_fold(k);
            let fit = fit_adjusters_on(sample, &folds.out_of_fold(k), &inside, plan, fold_seed(seed, k));
            (inside, fit)
        })
        .collect();
    let mut lower = vec![0.0; sample.len()];
    let mut upper = vec![0.0; sample.len()];
    let mut info = Vec::with_capacity(folds.k());
    for (k, (inside, fit)) in fits.into_iter().enumerate() {
        let fit = fit.map_err(|e| Error::FoldFit { fold: k + 1, source: Box::new(e) })?;
        for (j, &i) in inside.iter().enumerate() {
            lower[i] = fit.lower[j];
            upper[i] = fit.upper[j];
        }
        let (mean_l, sd_l) = mean_sd(&fit.lower);
        let (mean_u, sd_u) = mean_sd(&fit.upper);
        info.push(FoldInfo {
            fold: k + 1,
            model_l: fit.model_l,
            model_u: fit.model_u,
            mean_l,
            sd_l,
            mean_u,
            sd_u,
            warnings: fit.warnings,
        });
    }
    Ok(FoldAdjusters { lower, upper, folds: info })
}

/// An optimum is flagged as non-unique when the curve sits at its extreme
/// value over more than this fraction of the outcome range.
pub const FLAT_SPAN_FRACTION: f64 = 0.1;

/// Bounds from given per-unit adjusters, plus runtime diagnostics.
pub fn bounds_from_adjusters(
    sample: &Sample,
    s_l: &[f64],
    s_u: &[f64],
) -> Result<(BoundsEstimate, Vec<String>)> {
    if s_l.len() != sample.len() || s_u.len() != sample.len() {
        return Err(Error::config("adjusters do not match the sample"));
    }
    let z = |s: &[f64]| -> Vec<f64> { sample.y().iter().zip(s).map(|(y, s)| y - s).collect() };
    let curve_l = DeltaCurve::from_adjusted(&z(s_l), sample.d(), WeightMode::ArmShare)?;
    let curve_u = DeltaCurve::from_adjusted(&z(s_u), sample.d(), WeightMode::ArmShare)?;
    let lo = sup_delta(&curve_l);
    let hi = inf_delta(&curve_u);
    let var = variance_hat(sample, s_l, s_u, lo.t, hi.t);
    let mut notes = Vec::new();
    let range = sample.y_hi() - sample.y_lo();
    for (name, curve, ext) in [("lower", &curve_l, lo), ("upper", &curve_u, hi)] {
        if ext.is_sentinel() {
            notes.push(format!(
                "{name}-bound curve never crosses zero; its optimizer is reported as -inf"
            ));
        } else {
            let span = curve.extremum_span(ext);
            if span > FLAT_SPAN_FRACTION * range {
                notes.push(format!(
                    "{name}-bound optimizer is not unique: the extreme value holds over a span of {span:.4} \
                     (uniqueness of optimizers may fail)"
                ));
            }
        }
    }
    for arm in &var.constant_arms {
        notes.push(format!("zero variance: {arm} are constant (nondegenerate variance fails)"));
    }
    Ok((BoundsEstimate::new(lo, hi, &var, sample.pi_hat()), notes))
}

/// Output of the cross-fitting estimator.
#[derive(Clone, Debug)]
pub struct CrossFit {
    pub estimate: BoundsEstimate,
    pub adjusters: FoldAdjusters,
    pub diagnostics: Vec<String>,
}

/// Pooled cross-fitted estimator: each unit's indicator uses the adjuster
/// learned without its fold.
pub fn estimate_crossfit(sample: &Sample, folds: &FoldPlan, plan: &AdjusterPlan, seed: u64) -> Result<CrossFit> {
    let adjusters = fit_fold_adjusters(sample, folds, plan, seed)?;
    let (estimate, mut diagnostics) = bounds_from_adjusters(sample, &adjusters.lower, &adjusters.upper)?;
    for f in &adjusters.folds {
        diagnostics.extend(f.warnings.iter().map(|w| format!("fold {}: {w}", f.fold)));
    }
    Ok(CrossFit { estimate, adjusters, diagnostics })
}

/// One-sided intervals `[theta_L - z sigma_L / sqrt(n), 1]` and
/// `[0, theta_U + z sigma_U / sqrt(n)]`, clipped to `[0, 1]`, and p-values
/// for `theta_L = 0` and `theta_U = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneSided {
    pub alpha: f64,
    pub z: f64,
    pub lower_ci: (f64, f64),
    pub upper_ci: (f64, f64),
    pub p_lower: f64,
    pub p_upper: f64,
    /// A standard error was zero, so a p-value is 0, 1 or 0.5 by convention.
    pub degenerate: bool,
}

pub fn one_sided_cis(est: &BoundsEstimate, alpha: f64, n: usize) -> Result<OneSided> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    let z = z_upper(alpha);
    let rn = (n as f64).sqrt();
    let (se_l, se_u) = (est.sigma_l() / rn, est.sigma_u() / rn);
    let lo = (est.raw_l - z * se_l).clamp(0.0, 1.0);
    let hi = (est.raw_u + z * se_u).clamp(0.0, 1.0);
    let tail = |stat: f64, se: f64| -> (f64, bool) {
        if stat == 0.0 {
            (0.5, se == 0.0)
        } else if se == 0.0 {
            (if stat > 0.0 { 0.0 } else { 1.0 }, true)
        } else {
            (norm_cdf(-stat / se), false)
        }
    };
    let (p_lower, dl) = tail(est.raw_l, se_l);
    let (p_upper, du) = tail(1.0 - est.raw_u, se_u);
    Ok(OneSided { alpha, z, lower_ci: (lo, 1.0), upper_ci: (0.0, hi), p_lower, p_upper, degenerate: dl || du })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecdf::makarov_bounds;
    use crate::model::make_folds;

    fn sample(n: usize, seed: u64) -> Sample {
        use rand::Rng;
        let mut r = rng::stream(seed, &[]);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random::<f64>(), r.random::<f64>()]).collect();
        let d: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[i][0] * 2.0 + if d[i] { 0.3 } else { 0.0 } + r.random::<f64>())
            .collect();
        Sample::new(y, d, x).unwrap()
    }

    #[test]
    fn symmetric_bernoulli_variance() {
        let d = [true, true, false, false];
        let i = [true, false, true, false];
        let v = variance_from_indicators(&d, &i, &i);
        assert_eq!(v.sigma2_l, 1.0);
        assert!(v.constant_arms.is_empty());
    }

    #[test]
    fn constant_treated_indicators_are_flagged() {
        let d = [true, true, false, false];
        let il = [true, true, true, false];
        let v = variance_from_indicators(&d, &il, &il);
        assert_eq!(v.sigma2_l, 0.25 / 0.5);
        assert!(v.constant_arms.iter().any(|a| a.starts_with("treated lower")));
    }

    #[test]
    fn identical_arguments_give_identical_covariance() {
        let s = sample(101, 3);
        let adj: Vec<f64> = (0..101).map(|i| (i % 7) as f64 * 0.1).collect();
        let v = variance_hat(&s, &adj, &adj, 0.8, 0.8);
        assert_eq!(v.sigma_lu, v.sigma2_l);
    }

    #[test]
    fn zero_plan_reproduces_makarov() {
        let s = sample(200, 5);
        let folds = make_folds(&s, 5, 1).unwrap();
        let cf = estimate_crossfit(&s, &folds, &AdjusterPlan::Zero, 9).unwrap();
        assert_eq!(cf.estimate, makarov_bounds(&s).unwrap());
        let constant = AdjusterPlan::Learned(Learner::new(&[ModelSpec::Constant]));
        let cf2 = estimate_crossfit(&s, &folds, &constant, 9).unwrap();
        assert_eq!(cf2.estimate, cf.estimate);
    }

    #[test]
    fn learned_adjusters_are_deterministic() {
        let s = sample(120, 8);
        let folds = make_folds(&s, 3, 2).unwrap();
        let mut learner = Learner::new(&["knn_loc_shift".parse().unwrap()]);
        learner.grid = GridSpec::RandomNormal { size: 500 };
        let plan = AdjusterPlan::Learned(learner);
        let a = estimate_crossfit(&s, &folds, &plan, 4).unwrap();
        let b = estimate_crossfit(&s, &folds, &plan, 4).unwrap();
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.adjusters.lower, b.adjusters.lower);
        assert_eq!(a.adjusters.folds.len(), 3);
    }

    #[test]
    fn fold_errors_name_the_fold() {
        let s = sample(40, 1);
        let folds = make_folds(&s, 2, 2).unwrap();
        let plan = AdjusterPlan::Learned(Learner::new(&[ModelSpec::KnnLocShift { k: Some(500) }]));
        match estimate_crossfit(&s, &folds, &plan, 0) {
            Err(Error::FoldFit { fold, .. }) => assert_eq!(fold, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_sided_p_values() {
        let var = Variance { sigma2_l: 0.03f64.powi(2) * 100.0, sigma2_u: 1.0, sigma_lu: 0.0, constant_arms: vec![] };
        let est = BoundsEstimate::from_raw(0.108, 0.9, Some(0.0), Some(0.0), &var, 0.5);
        let r = one_sided_cis(&est, 0.05, 100).unwrap();
        assert!(r.p_lower < 1e-3);
        assert!((r.z - 1.644_853_626_951_472).abs() < 1e-12);
        assert!((r.lower_ci.0 - (0.108 - r.z * 0.03)).abs() < 1e-12);

        let zero = BoundsEstimate::from_raw(0.0, 1.0, None, None, &var, 0.5);
        let r = one_sided_cis(&zero, 0.05, 100).unwrap();
        assert_eq!((r.p_lower, r.p_upper), (0.5, 0.5));

        let flat = Variance::default();
        let r = one_sided_cis(&BoundsEstimate::from_raw(0.2, 0.7, None, None, &flat, 0.5), 0.05, 10).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.p_lower, r.p_upper), (0.0, 0.0));
        assert!(one_sided_cis(&zero, 1.5, 10).is_err());
    }

    #[test]
    fn covariance_is_bounded() {
        for seed in 0..20 {
            let s = sample(150, seed);
            let adj: Vec<f64> = (0..150).map(|i| ((i * 13 + seed as usize) % 11) as f64 * 0.2).collect();
            let (est, _) = bounds_from_adjusters(&s, &adj, &vec![0.0; 150]).unwrap();
            assert!(est.sigma2_l >= 0.0 && est.sigma2_u >= 0.0);
            assert!(est.sigma_lu.abs() <= (est.sigma2_l * est.sigma2_u).sqrt() + 1e-12);
        }
    }
}
