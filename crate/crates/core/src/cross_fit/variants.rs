//! Alternative estimators: the fixed-point comparison estimator, group and
//! known propensity weighting, and fold-learned evaluation points.

use serde::{Deserialize, Serialize};

use super::{fit_adjusters_on, fit_fold_adjusters, fold_seed, variance_from_indicators, AdjusterPlan, ArmMoments, BoundsEstimate, FoldAdjusters, Variance};
use crate::ecdf::{inf_delta, sup_delta, DeltaCurve, WeightMode};
use crate::error::{Error, Result};
use crate::model::{stratified_folds, FoldPlan, Propensity, Sample, PROPENSITY_FLOOR};

fn adjusted(sample: &Sample, s: &[f64]) -> Vec<f64> {
    sample.y().iter().zip(s).map(|(y, s)| y - s).collect()
}

fn check_propensity(sample: &Sample, p: &[f64]) -> Result<()> {
    Propensity::KnownFunction { p_of_x: p.to_vec() }.validate(sample, PROPENSITY_FLOOR)
}

/// Inverse-propensity moments of indicators: the curve value
/// `mean(psi)` and `mean(psi_L psi_U)` with
/// `psi = (D / p - (1 - D) / (1 - p)) I`.
fn ipw_variance(d: &[bool], p: &[f64], il: &[bool], iu: &[bool]) -> (Variance, f64, f64) {
    let n = d.len() as f64;
    let (mut dl, mut du, mut ql, mut qu, mut qlu) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..d.len() {
        let (w, w2) = if d[i] { (1.0 / p[i], 1.0 / (p[i] * p[i])) } else { (-1.0 / (1.0 - p[i]), 1.0 / ((1.0 - p[i]) * (1.0 - p[i]))) };
        if il[i] {
            dl += w;
            ql += w2;
        }
        if iu[i] {
            du += w;
            qu += w2;
        }
        if il[i] && iu[i] {
            qlu += w2;
        }
    }
    let (dl, du) = (dl / n, du / n);
    let var = Variance {
        sigma2_l: (ql / n - dl * dl).max(0.0),
        sigma2_u: (qu / n - du * du).max(0.0),
        sigma_lu: qlu / n - dl * du,
        constant_arms: vec![],
    };
    (var, dl, du)
}

/// The comparison estimator evaluates the inverse-propensity weighted curve
/// at `t = 0` instead of optimizing over `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SjlsEstimate {
    /// Lower and upper bounds at `t = 0`, unclipped, with variances.
    pub estimate: BoundsEstimate,
    /// The optimized counterparts on the same weighted curves.
    pub theta_c_l: f64,
    pub theta_c_u: f64,
}

pub fn sjls_estimate(sample: &Sample, s_l: &[f64], s_u: &[f64], p: &[f64]) -> Result<SjlsEstimate> {
    check_propensity(sample, p)?;
    if s_l.len() != sample.len() || s_u.len() != sample.len() {
        return Err(Error::config("adjusters do not match the sample"));
    }
    let mode = WeightMode::Ipw { p, normalize: false };
    let zl = adjusted(sample, s_l);
    let zu = adjusted(sample, s_u);
    let curve_l = DeltaCurve::from_adjusted(&zl, sample.d(), mode)?;
    let curve_u = DeltaCurve::from_adjusted(&zu, sample.d(), mode)?;
    let il: Vec<bool> = zl.iter().map(|&z| z <= 0.0).collect();
    let iu: Vec<bool> = zu.iter().map(|&z| z <= 0.0).collect();
    let (var, _, _) = ipw_variance(sample.d(), p, &il, &iu);
    let estimate = BoundsEstimate::from_raw(
        curve_l.eval(0.0),
        1.0 + curve_u.eval(0.0),
        Some(0.0),
        Some(0.0),
        &var,
        sample.pi_hat(),
    );
    Ok(SjlsEstimate {
        estimate,
        theta_c_l: sup_delta(&curve_l).value,
        theta_c_u: 1.0 + inf_delta(&curve_u).value,
    })
}

/// Optimized bounds on the un-normalized inverse-propensity weighted curve.
/// Raw values may leave `[0, 1]`.
pub fn known_propensity_bounds(sample: &Sample, s_l: &[f64], s_u: &[f64], p: &[f64]) -> Result<BoundsEstimate> {
    check_propensity(sample, p)?;
    let mode = WeightMode::Ipw { p, normalize: false };
    let zl = adjusted(sample, s_l);
    let zu = adjusted(sample, s_u);
    let lo = sup_delta(&DeltaCurve::from_adjusted(&zl, sample.d(), mode)?);
    let hi = inf_delta(&DeltaCurve::from_adjusted(&zu, sample.d(), mode)?);
    let il: Vec<bool> = zl.iter().map(|&z| z <= lo.t).collect();
    let iu: Vec<bool> = zu.iter().map(|&z| z <= hi.t).collect();
    let (var, _, _) = ipw_variance(sample.d(), p, &il, &iu);
    Ok(BoundsEstimate::new(lo, hi, &var, sample.pi_hat()))
}

pub fn variant_known_propensity(
    sample: &Sample,
    folds: &FoldPlan,
    plan: &AdjusterPlan,
    p: &[f64],
    seed: u64,
) -> Result<(BoundsEstimate, FoldAdjusters)> {
    check_propensity(sample, p)?;
    let adj = fit_fold_adjusters(sample, folds, plan, seed)?;
    let est = known_propensity_bounds(sample, &adj.lower, &adj.upper, p)?;
    Ok((est, adj))
}

/// Bounds on the group-weighted curve `sum_g pi(g) (F_{1,g} - F_{0,g})`,
/// with `pi(g)` the sample share of group `g`.
pub fn group_propensity_bounds(sample: &Sample, s_l: &[f64], s_u: &[f64], group_of: &[usize]) -> Result<BoundsEstimate> {
    Propensity::Group { group_of: group_of.to_vec() }.validate(sample, PROPENSITY_FLOOR)?;
    let groups = group_of.iter().max().map_or(0, |g| g + 1);
    let used: Vec<usize> = (0..groups).filter(|g| group_of.contains(g)).collect();
    if used.len() == 1 {
        return Ok(super::bounds_from_adjusters(sample, s_l, s_u)?.0);
    }
    let mode = WeightMode::Group { group_of };
    let zl = adjusted(sample, s_l);
    let zu = adjusted(sample, s_u);
    let lo = sup_delta(&DeltaCurve::from_adjusted(&zl, sample.d(), mode)?);
    let hi = inf_delta(&DeltaCurve::from_adjusted(&zu, sample.d(), mode)?);
    let il: Vec<bool> = zl.iter().map(|&z| z <= lo.t).collect();
    let iu: Vec<bool> = zu.iter().map(|&z| z <= hi.t).collect();
    let var = group_variance(sample.d(), group_of, &used, &il, &iu);
    Ok(BoundsEstimate::new(lo, hi, &var, sample.pi_hat()))
}

/// Within-group arm variances weighted by `pi(g)`, plus the between-group
/// spread of the group curves that the estimated shares add.
fn group_variance(d: &[bool], group_of: &[usize], used: &[usize], il: &[bool], iu: &[bool]) -> Variance {
    let n = d.len() as f64;
    let mut parts = Vec::with_capacity(used.len());
    for &g in used {
        let m1 = ArmMoments::collect((0..d.len()).filter(|&i| group_of[i] == g && d[i]), il, iu);
        let m0 = ArmMoments::collect((0..d.len()).filter(|&i| group_of[i] == g && !d[i]), il, iu);
        let share = (m1.n + m0.n) as f64 / n;
        let pi1 = m1.n as f64 / (m1.n + m0.n) as f64;
        parts.push((share, pi1, m1, m0));
    }
    let mean_l: f64 = parts.iter().map(|(w, _, a, b)| w * (a.m_l - b.m_l)).sum();
    let mean_u: f64 = parts.iter().map(|(w, _, a, b)| w * (a.m_u - b.m_u)).sum();
    let mut v = Variance::default();
    for (w, pi1, a, b) in &parts {
        let (gl, gu) = (a.m_l - b.m_l - mean_l, a.m_u - b.m_u - mean_u);
        v.sigma2_l += w * (a.var_l() / pi1 + b.var_l() / (1.0 - pi1)) + w * gl * gl;
        v.sigma2_u += w * (a.var_u() / pi1 + b.var_u() / (1.0 - pi1)) + w * gu * gu;
        v.sigma_lu += w * (a.cov() / pi1 + b.cov() / (1.0 - pi1)) + w * gl * gu;
    }
    v
}

/// Fold plan balanced within every group-by-arm cell.
pub fn group_folds(sample: &Sample, group_of: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > sample.n1().min(sample.n0()) {
        return Err(Error::config(format!("k_folds = {k} must lie in 2..={}", sample.n1().min(sample.n0()))));
    }
    let strata: Vec<usize> = (0..sample.len()).map(|i| 2 * group_of[i] + usize::from(sample.treated(i))).collect();
    Ok(stratified_folds(&strata, k, seed))
}

pub fn variant_group_propensity(
    sample: &Sample,
    group_of: &[usize],
    k: usize,
    plan: &AdjusterPlan,
    seed: u64,
) -> Result<(BoundsEstimate, FoldAdjusters)> {
    Propensity::Group { group_of: group_of.to_vec() }.validate(sample, PROPENSITY_FLOOR)?;
    let folds = group_folds(sample, group_of, k, seed)?;
    let adj = fit_fold_adjusters(sample, &folds, plan, seed)?;
    let est = group_propensity_bounds(sample, &adj.lower, &adj.upper, group_of)?;
    Ok((est, adj))
}

/// Evaluates at `t = 0` after absorbing per-fold evaluation points into the
/// adjusters: unit `i` counts when `y_i - s_i <= t_{k(i)}`. A `None` point
/// means the fold's optimum was off the data and no unit in it counts.
pub fn fold_t_from_parts(
    sample: &Sample,
    folds: &FoldPlan,
    s_l: &[f64],
    s_u: &[f64],
    t_l: &[Option<f64>],
    t_u: &[Option<f64>],
) -> Result<BoundsEstimate> {
    if t_l.len() != folds.k() || t_u.len() != folds.k() {
        return Err(Error::config("one evaluation point per fold is required"));
    }
    let f = folds.fold_of();
    let hit = |s: &[f64], t: &[Option<f64>]| -> Vec<bool> {
        (0..sample.len())
            .map(|i| t[f[i]].is_some_and(|t| sample.y()[i] - s[i] <= t))
            .collect()
    };
    let il = hit(s_l, t_l);
    let iu = hit(s_u, t_u);
    let d = sample.d();
    let m1 = ArmMoments::collect((0..d.len()).filter(|&i| d[i]), &il, &iu);
    let m0 = ArmMoments::collect((0..d.len()).filter(|&i| !d[i]), &il, &iu);
    let var = variance_from_indicators(d, &il, &iu);
    Ok(BoundsEstimate::from_raw(
        m1.m_l - m0.m_l,
        1.0 + m1.m_u - m0.m_u,
        Some(0.0),
        Some(0.0),
        &var,
        sample.pi_hat(),
    ))
}

/// For each fold, the adjuster is trained out-of-fold and its optimizer is
/// located on the out-of-fold units too, so the in-fold evaluation involves
/// no optimization.
pub fn variant_fold_t(sample: &Sample, folds: &FoldPlan, plan: &AdjusterPlan, seed: u64) -> Result<BoundsEstimate> {
    let all: Vec<usize> = (0..sample.len()).collect();
    let mut s_l = vec![0.0; sample.len()];
    let mut s_u = vec![0.0; sample.len()];
    let mut t_l = Vec::with_capacity(folds.k());
    let mut t_u = Vec::with_capacity(folds.k());
    for k in 0..folds.k() {
        let out = folds.out_of_fold(k);
        let fit = fit_adjusters_on(sample, &out, &all, plan, fold_seed(seed, k))
            .map_err(|e| Error::FoldFit { fold: k + 1, source: Box::new(e) })?;
        let d_out: Vec<bool> = out.iter().map(|&i| sample.treated(i)).collect();
        let z = |s: &[f64]| -> Vec<f64> { out.iter().map(|&i| sample.y()[i] - s[i]).collect() };
        let lo = sup_delta(&DeltaCurve::from_adjusted(&z(&fit.lower), &d_out, WeightMode::ArmShare)?);
        let hi = inf_delta(&DeltaCurve::from_adjusted(&z(&fit.upper), &d_out, WeightMode::ArmShare)?);
        t_l.push((!lo.is_sentinel()).then_some(lo.t));
        t_u.push((!hi.is_sentinel()).then_some(hi.t));
        for i in folds.in_fold(k) {
            s_l[i] = fit.lower[i];
            s_u[i] = fit.upper[i];
        }
    }
    fold_t_from_parts(sample, folds, &s_l, &s_u, &t_l, &t_u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_fit::{bounds_from_adjusters, estimate_crossfit};
    use crate::model::make_folds;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(n: usize, seed: u64) -> Sample {
        let mut r = rng::stream(seed, &[7]);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![r.random::<f64>()]).collect();
        let d: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let y = (0..n).map(|i| x[i][0] + if d[i] { 0.2 } else { 0.0 } + r.random::<f64>()).collect();
        Sample::new(y, d, x).unwrap()
    }

    #[test]
    fn estimated_share_weights_reproduce_crossfit() {
        let s = sample(90, 1);
        let adj: Vec<f64> = (0..90).map(|i| (i % 4) as f64 * 0.1).collect();
        let (plain, _) = bounds_from_adjusters(&s, &adj, &adj).unwrap();
        let p = vec![s.pi_hat(); 90];
        let ipw = known_propensity_bounds(&s, &adj, &adj, &p).unwrap();
        assert!((ipw.raw_l - plain.raw_l).abs() < 1e-12);
        assert!((ipw.raw_u - plain.raw_u).abs() < 1e-12);
    }

    #[test]
    fn sjls_at_optimum_equals_caide() {
        let s = sample(60, 2);
        let p = vec![0.5; 60];
        let zero = vec![0.0; 60];
        let first = sjls_estimate(&s, &zero, &zero, &p).unwrap();
        // Shift adjusters so that the optimizer lands at t = 0.
        let base = known_propensity_bounds(&s, &zero, &zero, &p).unwrap();
        let shift = base.t_l.unwrap();
        let moved = vec![shift; 60];
        let at = sjls_estimate(&s, &moved, &zero, &p).unwrap();
        assert_eq!(at.estimate.raw_l, at.theta_c_l);
        assert!(first.theta_c_l >= first.estimate.raw_l);
    }

    #[test]
    fn propensity_violations_are_errors() {
        let s = sample(10, 3);
        let mut p = vec![0.5; 10];
        p[4] = 1.0;
        let z = vec![0.0; 10];
        assert!(matches!(sjls_estimate(&s, &z, &z, &p), Err(Error::Parse { row: 5, .. })));
    }

    #[test]
    fn single_group_is_the_pooled_estimator() {
        let s = sample(80, 4);
        let adj: Vec<f64> = (0..80).map(|i| (i % 5) as f64 * 0.05).collect();
        let (plain, _) = bounds_from_adjusters(&s, &adj, &adj).unwrap();
        let g = group_propensity_bounds(&s, &adj, &adj, &vec![0; 80]).unwrap();
        assert_eq!(g, plain);
    }

    #[test]
    fn duplicated_groups_equal_pooled() {
        let s = sample(60, 5);
        let mut y = s.y().to_vec();
        y.extend_from_slice(s.y());
        let mut d = s.d().to_vec();
        d.extend_from_slice(s.d());
        let x = vec![vec![]; 120];
        let both = Sample::new(y, d, x).unwrap();
        let groups: Vec<usize> = (0..120).map(|i| i / 60).collect();
        let z = vec![0.0; 120];
        let g = group_propensity_bounds(&both, &z, &z, &groups).unwrap();
        let (plain, _) = bounds_from_adjusters(&both, &z, &z).unwrap();
        assert!((g.raw_l - plain.raw_l).abs() < 1e-12 && (g.raw_u - plain.raw_u).abs() < 1e-12);
        assert!((g.sigma2_l - plain.sigma2_l).abs() < 1e-12);
    }

    #[test]
    fn group_variance_two_symmetric_groups() {
        // Shares 1/2, arm shares 1/2, Bernoulli(1/2) indicators in every cell.
        let d = [true, true, false, false, true, true, false, false];
        let g = [0, 0, 0, 0, 1, 1, 1, 1];
        let i = [true, false, true, false, true, false, true, false];
        let v = group_variance(&d, &g, &[0, 1], &i, &i);
        assert_eq!(v.sigma2_l, 1.0);
    }

    #[test]
    fn known_propensity_excess_variance() {
        // 10 treated with 6 indicators on, 10 controls with 4 on, p = 1/2.
        let d: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let il: Vec<bool> = (0..20).map(|i| if i < 10 { i < 6 } else { i < 14 }).collect();
        let p = vec![0.5; 20];
        let (known, theta, _) = ipw_variance(&d, &p, &il, &il);
        let estimated = variance_from_indicators(&d, &il, &il);
        assert!((theta - 0.2).abs() < 1e-12);
        // E[psi^2] - theta^2 minus the arm-share variance works out to
        // (E Z1 / pi + E Z0 / (1 - pi))^2 pi (1 - pi) = (1.2 + 0.8)^2 / 4.
        let (a, b, pi) = (0.6f64, 0.4, 0.5);
        let excess = (a / pi + b / (1.0 - pi)).powi(2) * pi * (1.0 - pi);
        assert!((excess - 1.0).abs() < 1e-12);
        assert!((known.sigma2_l - estimated.sigma2_l - excess).abs() < 1e-12);
        assert!((estimated.sigma2_l - 0.96).abs() < 1e-12);
    }

    #[test]
    fn fold_t_at_global_optimizer_matches_crossfit() {
        let s = sample(75, 6);
        let folds = make_folds(&s, 3, 9).unwrap();
        let cf = estimate_crossfit(&s, &folds, &AdjusterPlan::Zero, 0).unwrap();
        let z = vec![0.0; 75];
        let e = &cf.estimate;
        let fixed = fold_t_from_parts(&s, &folds, &z, &z, &[e.t_l; 3], &[e.t_u; 3]).unwrap();
        assert_eq!(fixed.raw_l, e.raw_l);
        assert!((fixed.raw_u - e.raw_u).abs() < 1e-12);
    }

    #[test]
    fn fold_t_runs_with_zero_plan() {
        let s = sample(90, 7);
        let folds = make_folds(&s, 3, 1).unwrap();
        let ft = variant_fold_t(&s, &folds, &AdjusterPlan::Zero, 0).unwrap();
        let cf = estimate_crossfit(&s, &folds, &AdjusterPlan::Zero, 0).unwrap();
        assert!(ft.raw_l.abs() <= 1.0 && (0.0..=2.0).contains(&ft.raw_u));
        assert!(cf.estimate.raw_l >= 0.0);
    }

    proptest! {
        #[test]
        fn caide_dominates_sjls(
            units in prop::collection::vec((-3i32..3, any::<bool>(), -2.0f64..2.0, 0.05f64..0.95), 2..25),
        ) {
            let mut units = units;
            units[0].1 = true;
            units[1].1 = false;
            let n = units.len();
            let s = Sample::new(
                units.iter().map(|u| u.0 as f64 * 0.5).collect(),
                units.iter().map(|u| u.1).collect(),
                vec![vec![]; n],
            ).unwrap();
            let adj: Vec<f64> = units.iter().map(|u| u.2).collect();
            let p: Vec<f64> = units.iter().map(|u| u.3).collect();
            let r = sjls_estimate(&s, &adj, &adj, &p).unwrap();
            prop_assert!(r.theta_c_l >= r.estimate.raw_l);
            prop_assert!(r.theta_c_u <= r.estimate.raw_u);
        }
    }
}
