//! Step-function algebra for adjusted empirical CDFs and the difference
//! curve `t -> F1(t) - F0(t)`, with exact global optimization.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cross_fit::{variance_hat, BoundsEstimate};
use crate::error::{Error, Result};
use crate::model::{Adjuster, Sample};

/// Right-continuous step function: `eval(t)` is the height at the largest
/// breakpoint `<= t`, and 0 before the first breakpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCdf {
    breakpoints: Vec<f64>,
    heights: Vec<f64>,
}

impl StepCdf {
    /// Empirical CDF of `values`.
    pub fn new(values: &[f64]) -> Result<Self> {
        Self::weighted(values, &vec![1.0; values.len()], true)
    }

    /// Weighted empirical CDF. With `normalize` the heights end at exactly 1;
    /// otherwise they end at the weight total.
    pub fn weighted(values: &[f64], weights: &[f64], normalize: bool) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::degenerate("empirical CDF of an empty arm"));
        }
        if weights.len() != values.len() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("weights must be positive and match the values"));
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        let mut breakpoints = Vec::new();
        let mut cum = Vec::new();
        let mut acc = 0.0;
        for (pos, &i) in order.iter().enumerate() {
            acc += weights[i];
            let last_of_tie = order.get(pos + 1).is_none_or(|&j| values[j] != values[i]);
            if last_of_tie {
                breakpoints.push(values[i]);
                cum.push(acc);
            }
        }
        let total = acc;
        let heights = if normalize { cum.iter().map(|c| c / total).collect() } else { cum };
        Ok(StepCdf { breakpoints, heights })
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.breakpoints.partition_point(|&b| b <= t) {
            0 => 0.0,
            k => self.heights[k - 1],
        }
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }
}

/// How units are weighted when forming the two arm CDFs.
#[derive(Clone, Copy, Debug)]
pub enum WeightMode<'a> {
    /// Each arm's units get weight `1 / n_j`.
    ArmShare,
    /// Inverse-propensity weights `1 / p(X_i)` and `1 / (1 - p(X_i))`.
    /// Normalized within arm, or divided by `n` when `normalize` is false.
    Ipw { p: &'a [f64], normalize: bool },
    /// Group-stratified weights `pi(g) / n_{j,g}` with `pi(g) = n_g / n`.
    Group { group_of: &'a [usize] },
}

/// The pair of adjusted arm CDFs evaluated on the union of their breakpoints,
/// and their difference.
#[derive(Clone, Debug)]
pub struct DeltaCurve {
    breakpoints: Vec<f64>,
    f1: Vec<f64>,
    f0: Vec<f64>,
    delta: Vec<f64>,
}

/// Location and value of an extremum of the difference curve. `t` is
/// `-inf` when the extremum is 0 and attained only off the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    pub t: f64,
    pub value: f64,
}

impl Extremum {
    pub fn is_sentinel(&self) -> bool {
        self.t == f64::NEG_INFINITY
    }
}

impl DeltaCurve {
    /// Builds the curve from per-unit adjusted values `z_i = y_i - s(x_i)`.
    pub fn from_adjusted(z: &[f64], d: &[bool], mode: WeightMode<'_>) -> Result<Self> {
        let n = z.len();
        let n1 = d.iter().filter(|&&t| t).count();
        let n0 = n - n1;
        if n1 == 0 || n0 == 0 {
            return Err(Error::degenerate(format!(
                "difference curve needs both arms (treated {n1}, control {n0})"
            )));
        }
        // Unit weights; `None` means plain counts, which keeps arm heights exact.
        let weights: Option<Vec<f64>> = match mode {
            WeightMode::ArmShare => None,
            WeightMode::Ipw { p, normalize } => {
                if p.len() != n {
                    return Err(Error::config("propensity length does not match sample"));
                }
                let scale = if normalize { 1.0 } else { 1.0 / n as f64 };
                Some((0..n).map(|i| scale / if d[i] { p[i] } else { 1.0 - p[i] }).collect())
            }
            WeightMode::Group { group_of } => {
                if group_of.len() != n {
                    return Err(Error::config("group labels do not match sample"));
                }
                let groups = group_of.iter().max().map_or(0, |g| g + 1);
                let mut cells = vec![[0usize; 2]; groups];
                for i in 0..n {
                    cells[group_of[i]][usize::from(d[i])] += 1;
                }
                if let Some(g) = cells.iter().position(|c| (c[0] == 0) != (c[1] == 0)) {
                    return Err(Error::degenerate(format!("group {g} lacks one treatment arm")));
                }
                Some(
                    (0..n)
                        .map(|i| {
                            let c = cells[group_of[i]];
                            (c[0] + c[1]) as f64 / n as f64 / c[usize::from(d[i])] as f64
                        })
                        .collect(),
                )
            }
        };
        let normalize = !matches!(mode, WeightMode::Ipw { normalize: false, .. });

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| z[a].total_cmp(&z[b]));
        let mut breakpoints = Vec::new();
        let mut f1 = Vec::new();
        let mut f0 = Vec::new();
        let (mut c1, mut c0) = (0usize, 0usize);
        let (mut s1, mut s0) = (0.0f64, 0.0f64);
        for (pos, &i) in order.iter().enumerate() {
            if d[i] {
                c1 += 1;
            } else {
                c0 += 1;
            }
            if let Some(w) = &weights {
                if d[i] {
                    s1 += w[i];
                } else {
                    s0 += w[i];
                }
            }
            if order.get(pos + 1).is_none_or(|&j| z[j] != z[i]) {
                breakpoints.push(z[i]);
                match &weights {
                    None => {
                        f1.push(c1 as f64 / n1 as f64);
                        f0.push(c0 as f64 / n0 as f64);
                    }
                    Some(_) => {
                        f1.push(s1);
                        f0.push(s0);
                    }
                }
            }
        }
        if weights.is_some() && normalize {
            let (t1, t0) = (s1, s0);
            f1.iter_mut().for_each(|v| *v /= t1);
            f0.iter_mut().for_each(|v| *v /= t0);
        }
        let delta = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
        Ok(DeltaCurve { breakpoints, f1, f0, delta })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Curve values on `[b_k, b_{k+1})`, one per merged breakpoint.
    pub fn values(&self) -> &[f64] {
        &self.delta
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.breakpoints.partition_point(|&b| b <= t) {
            0 => 0.0,
            k => self.delta[k - 1],
        }
    }

    pub fn f1(&self) -> StepCdf {
        compress(&self.breakpoints, &self.f1)
    }

    pub fn f0(&self) -> StepCdf {
        compress(&self.breakpoints, &self.f0)
    }

    /// Width of the set of `t` on which the curve equals `ext.value`. Infinite
    /// when the extremum extends to the right end.
    pub fn extremum_span(&self, ext: Extremum) -> f64 {
        if ext.is_sentinel() {
            return f64::INFINITY;
        }
        let hits: Vec<usize> = (0..self.delta.len()).filter(|&k| self.delta[k] == ext.value).collect();
        match (hits.first(), hits.last()) {
            (Some(&a), Some(&b)) => match self.breakpoints.get(b + 1) {
                Some(&end) => end - self.breakpoints[a],
                None => f64::INFINITY,
            },
            _ => 0.0,
        }
    }

    /// Writes `t<TAB>delta` lines at every merged breakpoint.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t\tdelta")?;
        for (t, v) in self.breakpoints.iter().zip(&self.delta) {
            writeln!(w, "{t}\t{v}")?;
        }
        Ok(())
    }
}

fn compress(breakpoints: &[f64], heights: &[f64]) -> StepCdf {
    let mut b = Vec::new();
    let mut h: Vec<f64> = Vec::new();
    for (&t, &v) in breakpoints.iter().zip(heights) {
        if h.last().is_none_or(|&last| v > last) && v > 0.0 {
            b.push(t);
            h.push(v);
        }
    }
    StepCdf { breakpoints: b, heights: h }
}

/// Curve of `y - s(x)` across arms.
pub fn build_curve(sample: &Sample, adjuster: &Adjuster, mode: WeightMode<'_>) -> Result<DeltaCurve> {
    adjuster.check_len(sample)?;
    let z: Vec<f64> = sample.y().iter().zip(adjuster.values()).map(|(y, s)| y - s).collect();
    DeltaCurve::from_adjusted(&z, sample.d(), mode)
}

/// Global maximum of the curve, including the value 0 at minus infinity.
/// Ties go to the smallest breakpoint.
pub fn sup_delta(curve: &DeltaCurve) -> Extremum {
    scan(curve, |a, b| a > b)
}

/// Global minimum of the curve, including the value 0 at minus infinity.
pub fn inf_delta(curve: &DeltaCurve) -> Extremum {
    scan(curve, |a, b| a < b)
}

fn scan(curve: &DeltaCurve, better: impl Fn(f64, f64) -> bool) -> Extremum {
    let mut best = Extremum { t: f64::NEG_INFINITY, value: 0.0 };
    for (&t, &v) in curve.breakpoints.iter().zip(&curve.delta) {
        if better(v, best.value) {
            best = Extremum { t, value: v };
        }
    }
    best
}

/// Unadjusted bounds `[sup (F1 - F0), 1 + inf (F1 - F0)]`.
pub fn makarov_bounds(sample: &Sample) -> Result<BoundsEstimate> {
    let zero = Adjuster::zero(sample.len());
    let curve = build_curve(sample, &zero, WeightMode::ArmShare)?;
    let lo = sup_delta(&curve);
    let hi = inf_delta(&curve);
    let var = variance_hat(sample, zero.values(), zero.values(), lo.t, hi.t);
    Ok(BoundsEstimate::new(lo, hi, &var, sample.pi_hat()))
}
