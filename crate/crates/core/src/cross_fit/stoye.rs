//! Two-sided interval for a partially identified parameter with critical
//! values chosen to minimize expected length under joint normality.

use serde::{Deserialize, Serialize};

use super::BoundsEstimate;
use crate::error::{Error, Result};
use crate::normal::{integrate, norm_cdf, norm_pdf, z_upper};

/// Pretest threshold `h_n` for deciding whether the interval has positive
/// length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum HRule {
    /// `n^{-1/2} (log log n)^{1/2}`.
    LogLog,
    /// `n^{-1/2} (log n)^{1/2}`.
    Log,
    /// `n^{-1/2} (q log log n)^{1/2}`, `q >= 2`.
    QLogLog { q: f64 },
}

impl HRule {
    pub fn h(&self, n: usize) -> f64 {
        let n = n as f64;
        let loglog = n.ln().ln().max(0.0);
        let v = match *self {
            HRule::LogLog => loglog,
            HRule::Log => n.ln().max(0.0),
            HRule::QLogLog { q } => q * loglog,
        };
        (v / n).sqrt()
    }

    /// The three rules, with `q` for the last.
    pub fn all(q: f64) -> [HRule; 3] {
        [HRule::LogLog, HRule::Log, HRule::QLogLog { q }]
    }

    pub fn label(&self) -> String {
        match self {
            HRule::LogLog => "loglog".into(),
            HRule::Log => "log".into(),
            HRule::QLogLog { q } => format!("q_loglog:q={q}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoyeInterval {
    pub rule: String,
    pub c_l: f64,
    pub c_u: f64,
    pub lambda: f64,
    pub h_n: f64,
    /// Unclipped endpoints.
    pub lo: f64,
    pub hi: f64,
    /// The endpoints crossed, so the interval is empty.
    pub empty: bool,
}

impl StoyeInterval {
    pub fn clipped(&self) -> Option<(f64, f64)> {
        (!self.empty).then(|| (self.lo.clamp(0.0, 1.0), self.hi.clamp(0.0, 1.0)))
    }
}

pub fn stoye_ci(est: &BoundsEstimate, alpha: f64, n: usize, rule: HRule) -> Result<StoyeInterval> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::config(format!("alpha = {alpha} must lie in (0, 0.5)")));
    }
    if let HRule::QLogLog { q } = rule {
        if q.is_nan() || q < 2.0 {
            return Err(Error::config(format!("h_n multiplier q = {q} must be at least 2")));
        }
    }
    let h_n = rule.h(n);
    let width = est.raw_u - est.raw_l;
    let lambda = if width > h_n { width } else { 0.0 };
    let (c_l, c_u) = stoye_critical_values(est.sigma_l(), est.sigma_u(), est.sigma_lu, lambda, n, alpha)?;
    let rn = (n as f64).sqrt();
    let lo = est.raw_l - c_l * est.sigma_l() / rn;
    let hi = est.raw_u + c_u * est.sigma_u() / rn;
    Ok(StoyeInterval { rule: rule.label(), c_l, c_u, lambda, h_n, lo, hi, empty: lo > hi })
}

/// Bivariate normal coverage probabilities of the two one-sided events.
struct Constraints {
    rho: f64,
    s: f64,
    a_l: f64,
    a_u: f64,
}

const Z_CUT: f64 = 8.0;
const QUAD_TOL: f64 = 1e-11;

impl Constraints {
    /// `P(Z1 >= -c_l, rho Z1 - s Z2 <= c_u + a_u)`.
    fn c1(&self, c_l: f64, c_u: f64) -> f64 {
        if self.a_u.is_infinite() {
            return norm_cdf(c_l);
        }
        let b = c_u + self.a_u;
        if self.s < 1e-7 {
            return if self.rho > 0.0 {
                (norm_cdf(b / self.rho) - norm_cdf(-c_l)).max(0.0)
            } else {
                norm_cdf(-(-c_l).max(b / self.rho))
            };
        }
        let (rho, s) = (self.rho, self.s);
        integrate(|z| norm_pdf(z) * norm_cdf((b - rho * z) / s), -c_l, Z_CUT, QUAD_TOL).0
    }

    /// `P(Z1 <= c_u, rho Z1 - s Z2 >= -(c_l + a_l))`.
    fn c2(&self, c_l: f64, c_u: f64) -> f64 {
        if self.a_l.is_infinite() {
            return norm_cdf(c_u);
        }
        let m = c_l + self.a_l;
        if self.s < 1e-7 {
            return if self.rho > 0.0 {
                (norm_cdf(c_u) - norm_cdf(-m / self.rho)).max(0.0)
            } else {
                norm_cdf(c_u.min(m / -self.rho))
            };
        }
        let (rho, s) = (self.rho, self.s);
        integrate(|z| norm_pdf(z) * norm_cdf((rho * z + m) / s), -Z_CUT, c_u, QUAD_TOL).0
    }
}

/// Minimizes `sigma_l c_l + sigma_u c_u` subject to both coverage
/// constraints, with `c_l, c_u` restricted to `[z_alpha, z_{alpha/2}]`.
pub fn stoye_critical_values(
    sigma_l: f64,
    sigma_u: f64,
    sigma_lu: f64,
    lambda: f64,
    n: usize,
    alpha: f64,
) -> Result<(f64, f64)> {
    let lo = z_upper(alpha);
    let hi = z_upper(alpha / 2.0);
    let rn = (n as f64).sqrt();
    let rho = if sigma_l > 0.0 && sigma_u > 0.0 { (sigma_lu / (sigma_l * sigma_u)).clamp(-1.0, 1.0) } else { 0.0 };
    let shift = |sigma: f64| {
        if lambda == 0.0 {
            0.0
        } else if sigma == 0.0 {
            f64::INFINITY
        } else {
            rn * lambda / sigma
        }
    };
    let con = Constraints { rho, s: (1.0 - rho * rho).max(0.0).sqrt(), a_l: shift(sigma_l), a_u: shift(sigma_u) };
    let target = 1.0 - alpha - 1e-10;
    let feasible = |c_l: f64, c_u: f64| con.c1(c_l, c_u) >= target && con.c2(c_l, c_u) >= target;

    let bisect = |ok: &dyn Fn(f64) -> bool| -> f64 {
        if ok(lo) {
            return lo;
        }
        let (mut a, mut b) = (lo, hi);
        for _ in 0..55 {
            let m = 0.5 * (a + b);
            if ok(m) {
                b = m;
            } else {
                a = m;
            }
        }
        b
    };

    if !feasible(hi, hi) {
        return Err(Error::NoConvergence {
            iterations: 0,
            c_lower: hi,
            c_upper: hi,
            residual_lower: con.c1(hi, hi) - (1.0 - alpha),
            residual_upper: con.c2(hi, hi) - (1.0 - alpha),
        });
    }
    let c_u_min = bisect(&|c_u| feasible(hi, c_u));
    let c_l_of = |c_u: f64| bisect(&|c_l| feasible(c_l, c_u));
    let cost = |c_u: f64| {
        let c_l = c_l_of(c_u);
        (sigma_l * c_l + sigma_u * c_u, c_l)
    };

    // Coarse scan, then golden-section refinement around the best point.
    let steps = 32;
    let xs: Vec<f64> = (0..=steps).map(|k| c_u_min + (hi - c_u_min) * k as f64 / steps as f64).collect();
    let vals: Vec<f64> = xs.iter().map(|&x| cost(x).0).collect();
    let best = (0..vals.len()).fold(0, |b, k| if vals[k] < vals[b] { k } else { b });
    let (mut a, mut b) = (xs[best.saturating_sub(1)], xs[(best + 1).min(steps)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (cost(x1).0, cost(x2).0);
    let mut iterations = 0;
    while b - a > 1e-10 && iterations < 200 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = cost(x1).0;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = cost(x2).0;
        }
        iterations += 1;
    }
    let mut c_u = 0.5 * (a + b);
    let (mut val, mut c_l) = cost(c_u);
    if vals[best] < val {
        c_u = xs[best];
        (val, c_l) = cost(c_u);
    }
    debug_assert!(val.is_finite());
    if !feasible(c_l, c_u) {
        return Err(Error::NoConvergence {
            iterations,
            c_lower: c_l,
            c_upper: c_u,
            residual_lower: con.c1(c_l, c_u) - (1.0 - alpha),
            residual_upper: con.c2(c_l, c_u) - (1.0 - alpha),
        });
    }
    Ok((c_l, c_u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross_fit::Variance;

    fn est(l: f64, u: f64, s2l: f64, s2u: f64, slu: f64) -> BoundsEstimate {
        let v = Variance { sigma2_l: s2l, sigma2_u: s2u, sigma_lu: slu, constant_arms: vec![] };
        BoundsEstimate::from_raw(l, u, Some(0.0), Some(0.0), &v, 0.5)
    }

    #[test]
    fn threshold_rule() {
        let n = 2000;
        let h = HRule::LogLog.h(n);
        assert!(h > 0.0 && h < 0.04);
        let wide = stoye_ci(&est(0.2, 0.5, 1.0, 1.0, 0.3), 0.05, n, HRule::LogLog).unwrap();
        assert_eq!(wide.lambda, 0.5 - 0.2);
        let narrow = stoye_ci(&est(0.2, 0.2 + h / 2.0, 1.0, 1.0, 0.3), 0.05, n, HRule::LogLog).unwrap();
        assert_eq!(narrow.lambda, 0.0);
    }

    #[test]
    fn decoupled_limit_gives_one_sided_values() {
        let za = z_upper(0.05);
        let (cl, cu) = stoye_critical_values(1.0, 1.3, 0.4, 1e3, 1000, 0.05).unwrap();
        assert!((cl - za).abs() < 1e-4 && (cu - za).abs() < 1e-4, "{cl} {cu}");
    }

    #[test]
    fn perfect_correlation_gives_two_sided_values() {
        let z2 = z_upper(0.025);
        let (cl, cu) = stoye_critical_values(0.7, 0.7, 0.49, 0.0, 500, 0.05).unwrap();
        assert!((cl - z2).abs() < 1e-4 && (cu - z2).abs() < 1e-4, "{cl} {cu}");
    }

    #[test]
    fn independent_point_case_matches_closed_form() {
        // rho = 0, Lambda = 0, equal sigmas: both constraints are
        // P(Z1 >= -c) P(Z2 <= c) style products; by symmetry c_l = c_u = c
        // with Phi(c) - Phi(-c) ... checked through the constraint itself.
        let (cl, cu) = stoye_critical_values(1.0, 1.0, 0.0, 0.0, 400, 0.1).unwrap();
        assert!((cl - cu).abs() < 1e-6);
        // P(Z1 >= -c, Z2' <= c) with independent Z's equals Phi(c)^2.
        assert!((norm_cdf(cl) * norm_cdf(cu) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn critical_values_stay_in_the_box() {
        let (za, z2) = (z_upper(0.05), z_upper(0.025));
        for &(sl, su, r, lam) in &[(1.0, 0.2, 0.5, 0.0), (0.1, 2.0, -0.3, 0.01), (1.0, 1.0, 0.9, 0.05), (0.5, 0.5, -0.99, 0.0)] {
            let (cl, cu) = stoye_critical_values(sl, su, r * sl * su, lam, 800, 0.05).unwrap();
            assert!(cl >= za - 1e-6 && cl <= z2 + 1e-6, "{cl}");
            assert!(cu >= za - 1e-6 && cu <= z2 + 1e-6, "{cu}");
        }
    }

    #[test]
    fn nested_in_bonferroni() {
        let e = est(0.3, 0.45, 0.8, 1.1, 0.2);
        for rule in HRule::all(2.0) {
            let s = stoye_ci(&e, 0.05, 600, rule).unwrap();
            let z2 = z_upper(0.025);
            let rn = 600f64.sqrt();
            assert!(s.lo >= e.raw_l - z2 * e.sigma_l() / rn - 1e-12);
            assert!(s.hi <= e.raw_u + z2 * e.sigma_u() / rn + 1e-12);
        }
    }

    #[test]
    fn zero_variance_is_handled() {
        let s = stoye_ci(&est(0.3, 0.6, 0.0, 0.0, 0.0), 0.05, 100, HRule::LogLog).unwrap();
        assert_eq!((s.lo, s.hi), (0.3, 0.6));
        let one = stoye_ci(&est(0.3, 0.6, 0.0, 1.0, 0.0), 0.05, 100, HRule::LogLog).unwrap();
        assert!((one.c_u - z_upper(0.05)).abs() < 1e-6);
    }

    #[test]
    fn crossing_is_flagged_empty() {
        let s = stoye_ci(&est(0.6, 0.3, 1e-6, 1e-6, 0.0), 0.05, 100, HRule::LogLog).unwrap();
        assert!(s.empty);
        assert!(s.clipped().is_none());
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let e = est(0.3, 0.6, 1.0, 1.0, 0.0);
        assert!(stoye_ci(&e, 0.6, 100, HRule::LogLog).is_err());
        assert!(stoye_ci(&e, 0.05, 100, HRule::QLogLog { q: 1.0 }).is_err());
    }
}
