//! Conditional outcome distributions `F_j(t | x)` and the plug-in adjusters
//! `argmax_t F_1(t|x) - F_0(t|x)` / `argmin_t` built from them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::cross_fit::{estimate_crossfit, AdjusterPlan, Learner};
use crate::model::{make_folds, ArmData, Sample};
use crate::rng;

/// A fitted `x -> F(. | x)` map.
pub trait ConditionalCdfModel: Send + Sync {
    /// The conditional distribution at covariate row `x`.
    fn conditional(&self, x: &[f64]) -> CondCdf;

    fn eval_cdf(&self, t: f64, x: &[f64]) -> f64 {
        self.conditional(x).eval(t)
    }

    /// True when the model ignores covariates.
    fn covariate_free(&self) -> bool {
        false
    }
}

/// Something that can be trained on one arm's data.
pub trait ModelFactory: Send + Sync {
    fn fit(&self, arm: &ArmData, seed: u64) -> Result<FittedModel>;

    fn name(&self) -> String;

    /// Models whose adjuster is identically zero skip fitting altogether.
    fn zero_adjuster(&self) -> bool {
        false
    }
}

pub struct FittedModel {
    pub model: Box<dyn ConditionalCdfModel>,
    pub warnings: Vec<String>,
}

/// One conditional CDF, either a shifted empirical CDF or a piecewise-linear
/// interpolation of quantiles on an evenly spaced `tau` grid from 0 to 1.
#[derive(Clone, Debug)]
pub enum CondCdf {
    /// `t -> #{v <= t - shift} / len`.
    Ecdf { sorted: Arc<[f64]>, shift: f64 },
    /// Sorted quantiles at `tau_k = k / (len - 1)`.
    Interp { knots: Vec<f64> },
}

impl CondCdf {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            CondCdf::Ecdf { sorted, shift } => {
                let u = t - shift;
                sorted.partition_point(|&v| v <= u) as f64 / sorted.len() as f64
            }
            CondCdf::Interp { knots } => interp_cdf(knots, t),
        }
    }

    /// Evaluates at every point of an ascending grid.
    pub fn eval_sorted(&self, ts: &[f64], out: &mut [f64]) {
        match self {
            CondCdf::Ecdf { sorted, shift } => {
                let n = sorted.len() as f64;
                let mut j = 0;
                for (o, &t) in out.iter_mut().zip(ts) {
                    let u = t - shift;
                    while j < sorted.len() && sorted[j] <= u {
                        j += 1;
                    }
                    *o = j as f64 / n;
                }
            }
            CondCdf::Interp { knots } => {
                for (o, &t) in out.iter_mut().zip(ts) {
                    *o = interp_cdf(knots, t);
                }
            }
        }
    }
}

fn interp_cdf(q: &[f64], t: f64) -> f64 {
    let m = q.len() - 1;
    let tau = |k: usize| k as f64 / m as f64;
    if t < q[0] {
        return 0.0;
    }
    if t > q[m] {
        return 1.0;
    }
    let above = q.partition_point(|&v| v <= t);
    let lo = above - 1;
    if q[lo] == t {
        // Zero-width brackets get the midpoint of the tied taus.
        let first = q.partition_point(|&v| v < t);
        return 0.5 * (tau(first) + tau(lo));
    }
    let (ta, tb) = (q[lo], q[lo + 1]);
    tau(lo) + (tau(lo + 1) - tau(lo)) * (t - ta) / (tb - ta)
}

/// Registered learners, as parsed from strings like `knn_loc_shift:k=15`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelSpec {
    /// Covariate-free empirical CDF; its adjuster is taken to be zero.
    Constant,
    /// k-nearest-neighbor mean plus residual ECDF. `None` means `ceil(sqrt(n))`.
    KnnLocShift { k: Option<usize> },
    /// Ridge mean plus residual ECDF. `None` picks the penalty by GCV.
    RidgeLocShift { lambda: Option<f64> },
    /// Per-tau quantiles of the k nearest neighbors, linearly interpolated.
    KnnQuantile { k: Option<usize> },
}

pub const MODEL_NAMES: [&str; 4] = ["constant", "knn_loc_shift", "ridge_loc_shift", "knn_quantile"];

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, params) = s.split_once(':').unwrap_or((s, ""));
        let mut value: Option<(&str, &str)> = None;
        for kv in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("model parameter '{kv}' is not key=value")))?;
            value = Some((k.trim(), v.trim()));
        }
        let count = |key: &str| -> Result<Option<usize>> {
            match value {
                None => Ok(None),
                Some((k, v)) if k == key => {
                    if v == "auto" {
                        return Ok(None);
                    }
                    let n: usize = v.parse().map_err(|_| Error::config(format!("bad {key} = '{v}'")))?;
                    if n == 0 {
                        return Err(Error::config(format!("{key} must be positive")));
                    }
                    Ok(Some(n))
                }
                Some((k, _)) => Err(Error::config(format!("unknown parameter '{k}' for model '{name}'"))),
            }
        };
        match name {
            "constant" => match value {
                None => Ok(ModelSpec::Constant),
                Some((k, _)) => Err(Error::config(format!("unknown parameter '{k}' for model 'constant'"))),
            },
            "knn_loc_shift" => Ok(ModelSpec::KnnLocShift { k: count("k")? }),
            "knn_quantile" => Ok(ModelSpec::KnnQuantile { k: count("k")? }),
            "ridge_loc_shift" => match value {
                None | Some(("lambda", "auto")) => Ok(ModelSpec::RidgeLocShift { lambda: None }),
                Some(("lambda", v)) => {
                    let l: f64 = v.parse().map_err(|_| Error::config(format!("bad lambda = '{v}'")))?;
                    if !(l.is_finite() && l >= 0.0) {
                        return Err(Error::config("lambda must be a nonnegative number"));
                    }
                    Ok(ModelSpec::RidgeLocShift { lambda: Some(l) })
                }
                Some((k, _)) => Err(Error::config(format!("unknown parameter '{k}' for model '{name}'"))),
            },
            other => Err(Error::config(format!(
                "unknown model '{other}' (expected one of: {})",
                MODEL_NAMES.join(", ")
            ))),
        }
    }
}

impl TryFrom<String> for ModelSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelSpec> for String {
    fn from(m: ModelSpec) -> String {
        m.to_string()
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = |k: &Option<usize>| k.map_or("auto".to_string(), |v| v.to_string());
        match self {
            ModelSpec::Constant => write!(f, "constant"),
            ModelSpec::KnnLocShift { k: kk } => write!(f, "knn_loc_shift:k={}", k(kk)),
            ModelSpec::KnnQuantile { k: kk } => write!(f, "knn_quantile:k={}", k(kk)),
            ModelSpec::RidgeLocShift { lambda: None } => write!(f, "ridge_loc_shift:lambda=auto"),
            ModelSpec::RidgeLocShift { lambda: Some(l) } => write!(f, "ridge_loc_shift:lambda={l}"),
        }
    }
}

impl ModelFactory for ModelSpec {
    fn fit(&self, arm: &ArmData, _seed: u64) -> Result<FittedModel> {
        if arm.is_empty() {
            return Err(Error::degenerate("cannot fit a model on an empty arm"));
        }
        let n = arm.len();
        let default_k = (n as f64).sqrt().ceil() as usize;
        let constant = || FittedModel { model: Box::new(ConstantModel::new(&arm.y)), warnings: vec![] };
        let check_k = |k: usize| -> Result<usize> {
            if k > n {
                Err(Error::Fit(format!("k = {k} exceeds the arm size {n}")))
            } else {
                Ok(k)
            }
        };
        let with_fallback = |build: &dyn Fn(Standardizer) -> Result<Box<dyn ConditionalCdfModel>>| {
            match Standardizer::fit(arm) {
                Some(st) => Ok(FittedModel { model: build(st)?, warnings: vec![] }),
                None => {
                    let mut f = constant();
                    f.warnings.push(format!("{self}: covariates are constant; using the constant model"));
                    Ok(f)
                }
            }
        };
        match self {
            ModelSpec::Constant => Ok(constant()),
            ModelSpec::KnnLocShift { k } => {
                let k = check_k(k.unwrap_or(default_k))?;
                with_fallback(&|st| {
                    let knn = Knn::new(st, arm);
                    let mu = KnnMean { knn, k };
                    Ok(Box::new(LocShift::new(Box::new(mu), arm)))
                })
            }
            ModelSpec::KnnQuantile { k } => {
                let k = check_k(k.unwrap_or(default_k))?;
                with_fallback(&|st| Ok(Box::new(KnnQuantile { knn: Knn::new(st, arm), k, levels: 101 })))
            }
            ModelSpec::RidgeLocShift { lambda } => with_fallback(&|st| {
                let ridge = Ridge::fit(st, arm, *lambda)?;
                Ok(Box::new(LocShift::new(Box::new(ridge), arm)))
            }),
        }
    }

    fn name(&self) -> String {
        self.to_string()
    }

    fn zero_adjuster(&self) -> bool {
        matches!(self, ModelSpec::Constant)
    }
}

/// Fits `spec` on one arm's training data.
pub fn fit_arm_model(train: &ArmData, spec: &dyn ModelFactory, seed: u64) -> Result<FittedModel> {
    spec.fit(train, seed)
}

pub struct ConstantModel {
    sorted: Arc<[f64]>,
}

impl ConstantModel {
    pub fn new(y: &[f64]) -> Self {
        let mut v = y.to_vec();
        v.sort_by(f64::total_cmp);
        ConstantModel { sorted: v.into() }
    }
}

impl ConditionalCdfModel for ConstantModel {
    fn conditional(&self, _x: &[f64]) -> CondCdf {
        CondCdf::Ecdf { sorted: self.sorted.clone(), shift: 0.0 }
    }

    fn covariate_free(&self) -> bool {
        true
    }
}

trait Regressor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
}

/// Mean regressor plus the empirical CDF of in-sample residuals.
struct LocShift {
    mean: Box<dyn Regressor>,
    residuals: Arc<[f64]>,
}

impl LocShift {
    fn new(mean: Box<dyn Regressor>, arm: &ArmData) -> Self {
        let mut r: Vec<f64> = (0..arm.len()).map(|i| arm.y[i] - mean.predict(arm.row(i))).collect();
        r.sort_by(f64::total_cmp);
        LocShift { mean, residuals: r.into() }
    }
}

impl ConditionalCdfModel for LocShift {
    fn conditional(&self, x: &[f64]) -> CondCdf {
        CondCdf::Ecdf { sorted: self.residuals.clone(), shift: self.mean.predict(x) }
    }
}

/// Column standardization; constant columns are dropped.
#[derive(Clone)]
struct Standardizer {
    cols: Vec<usize>,
    mean: Vec<f64>,
    sd: Vec<f64>,
}

impl Standardizer {
    fn fit(arm: &ArmData) -> Option<Self> {
        let n = arm.len() as f64;
        let mut st = Standardizer { cols: vec![], mean: vec![], sd: vec![] };
        for j in 0..arm.p {
            let m = (0..arm.len()).map(|i| arm.row(i)[j]).sum::<f64>() / n;
            let v = (0..arm.len()).map(|i| (arm.row(i)[j] - m).powi(2)).sum::<f64>() / n;
            if v > 1e-24 * (1.0 + m * m) {
                st.cols.push(j);
                st.mean.push(m);
                st.sd.push(v.sqrt());
            }
        }
        (!st.cols.is_empty()).then_some(st)
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.cols.iter().zip(&self.mean).zip(&self.sd).map(|((&j, m), s)| (x[j] - m) / s));
    }

    fn dim(&self) -> usize {
        self.cols.len()
    }
}

struct Knn {
    st: Standardizer,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Knn {
    fn new(st: Standardizer, arm: &ArmData) -> Self {
        let mut x = Vec::with_capacity(arm.len() * st.dim());
        let mut buf = Vec::new();
        for i in 0..arm.len() {
            st.apply(arm.row(i), &mut buf);
            x.extend_from_slice(&buf);
        }
        Knn { st, x, y: arm.y.clone() }
    }

    /// Outcomes of the `k` nearest training points; distance ties go to the
    /// lower training index.
    fn neighbor_outcomes(&self, x: &[f64], k: usize) -> Vec<f64> {
        let mut q = Vec::new();
        self.st.apply(x, &mut q);
        let p = q.len();
        let mut dist: Vec<(f64, usize)> = self
            .x
            .chunks_exact(p)
            .enumerate()
            .map(|(i, row)| (row.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < dist.len() {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        dist[..k].iter().map(|&(_, i)| self.y[i]).collect()
    }
}

struct KnnMean {
    knn: Knn,
    k: usize,
}

impl Regressor for KnnMean {
    fn predict(&self, x: &[f64]) -> f64 {
        let v = self.knn.neighbor_outcomes(x, self.k);
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct KnnQuantile {
    knn: Knn,
    k: usize,
    levels: usize,
}

impl ConditionalCdfModel for KnnQuantile {
    fn conditional(&self, x: &[f64]) -> CondCdf {
        let mut v = self.knn.neighbor_outcomes(x, self.k);
        v.sort_by(f64::total_cmp);
        let m = self.levels - 1;
        let mut knots: Vec<f64> = (0..=m)
            .map(|k| {
                let pos = k as f64 / m as f64 * (v.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
            })
            .collect();
        knots.sort_by(f64::total_cmp);
        CondCdf::Interp { knots }
    }
}

struct Ridge {
    st: Standardizer,
    intercept: f64,
    beta: Vec<f64>,
}

impl Ridge {
    fn fit(st: Standardizer, arm: &ArmData, lambda: Option<f64>) -> Result<Self> {
        let n = arm.len();
        let p = st.dim();
        let mut buf = Vec::new();
        let mut xs = DMatrix::<f64>::zeros(n, p);
        for i in 0..n {
            st.apply(arm.row(i), &mut buf);
            for j in 0..p {
                xs[(i, j)] = buf[j];
            }
        }
        let ybar = arm.y.iter().sum::<f64>() / n as f64;
        let yc = DVector::from_iterator(n, arm.y.iter().map(|v| v - ybar));
        let xtx = xs.transpose() * &xs;
        let xty = xs.transpose() * &yc;
        let eig = xtx.symmetric_eigen();
        let vt_xty = eig.eigenvectors.transpose() * &xty;
        let solve = |lam: f64| -> DVector<f64> {
            let scaled = DVector::from_iterator(
                p,
                (0..p).map(|j| vt_xty[j] / (eig.eigenvalues[j].max(0.0) + lam)),
            );
            &eig.eigenvectors * scaled
        };
        let lam = match lambda {
            Some(l) => l,
            None => {
                let mut best = (f64::INFINITY, 1.0);
                for e in 0..=32 {
                    let lam = n as f64 * 10f64.powf(-6.0 + 0.25 * e as f64);
                    let b = solve(lam);
                    let rss = (&yc - &xs * &b).norm_squared();
                    let df: f64 = eig.eigenvalues.iter().map(|&d| d.max(0.0) / (d.max(0.0) + lam)).sum();
                    let denom = 1.0 - (df + 1.0) / n as f64;
                    if denom <= 0.0 {
                        continue;
                    }
                    let gcv = rss / n as f64 / (denom * denom);
                    if gcv < best.0 {
                        best = (gcv, lam);
                    }
                }
                best.1
            }
        };
        let beta = solve(lam);
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Fit("ridge solution is not finite".into()));
        }
        Ok(Ridge { st, intercept: ybar, beta: beta.iter().copied().collect() })
    }
}

impl Regressor for Ridge {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut buf = Vec::new();
        self.st.apply(x, &mut buf);
        self.intercept + buf.iter().zip(&self.beta).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// The search grid `T` for `argmax_{t in T}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridSpec {
    /// Draws from `Normal(0, (max Y - min Y)^2)`.
    RandomNormal { size: usize },
    /// Evenly spaced over `[min Y - range, max Y + range]`.
    Equispaced { size: usize },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::RandomNormal { size: 10_000 }
    }
}

impl GridSpec {
    /// Ascending grid for outcomes spanning `[y_lo, y_hi]`.
    pub fn draw(&self, y_lo: f64, y_hi: f64, seed: u64) -> Result<Vec<f64>> {
        let range = if y_hi > y_lo { y_hi - y_lo } else { 1.0 };
        let mut g = match *self {
            GridSpec::RandomNormal { size } | GridSpec::Equispaced { size } if size == 0 => {
                return Err(Error::config("argmax grid is empty"));
            }
            GridSpec::RandomNormal { size } => {
                let mut r = rng::stream(seed, &[0x6121D]);
                let normal = Normal::new(0.0, range).map_err(|e| Error::config(e.to_string()))?;
                (0..size).map(|_| normal.sample(&mut r)).collect::<Vec<f64>>()
            }
            GridSpec::Equispaced { size } => {
                let (a, b) = (y_lo - range, y_hi + range);
                let step = if size > 1 { (b - a) / (size - 1) as f64 } else { 0.0 };
                (0..size).map(|k| a + step * k as f64).collect()
            }
        };
        g.sort_by(f64::total_cmp);
        Ok(g)
    }
}

/// Per-row `argmax` and `argmin` over `grid` (ascending) of
/// `m1(t|x) - m0(t|x)`; ties go to the smallest grid point.
pub fn extract_adjusters(
    m1: &dyn ConditionalCdfModel,
    m0: &dyn ConditionalCdfModel,
    eval: &ArmData,
    grid: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grid.is_empty() {
        return Err(Error::config("argmax grid is empty"));
    }
    let (n, p) = (eval.len(), eval.p);
    let per_row = |x: &[f64]| -> (f64, f64) {
        let mut a = vec![0.0; grid.len()];
        let mut b = vec![0.0; grid.len()];
        m1.conditional(x).eval_sorted(grid, &mut a);
        m0.conditional(x).eval_sorted(grid, &mut b);
        let (mut hi, mut lo) = ((f64::NEG_INFINITY, grid[0]), (f64::INFINITY, grid[0]));
        for (k, &t) in grid.iter().enumerate() {
            let d = a[k] - b[k];
            if d > hi.0 {
                hi = (d, t);
            }
            if d < lo.0 {
                lo = (d, t);
            }
        }
        (hi.1, lo.1)
    };
    if m1.covariate_free() && m0.covariate_free() || p == 0 {
        let (l, u) = per_row(&[]);
        return Ok((vec![l; n], vec![u; n]));
    }
    let pairs: Vec<(f64, f64)> = eval.x.par_chunks(p).map(per_row).collect();
    Ok(pairs.into_iter().unzip())
}

/// Which bound a model is chosen for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lower = 0,
    Upper = 1,
}

pub struct Selection {
    pub model: Arc<dyn ModelFactory>,
    /// Inner cross-validated bound per candidate; `None` when it failed.
    pub scores: Vec<(String, Option<f64>)>,
    pub warnings: Vec<String>,
}

/// Picks the candidate with the largest inner cross-fitted lower bound
/// (`Side::Lower`) or the smallest upper bound, using `train` only.
/// Failing candidates are skipped; if all fail the constant model is used.
pub fn select_model(
    candidates: &[Arc<dyn ModelFactory>],
    train: &Sample,
    side: Side,
    cv_folds: usize,
    grid: &GridSpec,
    seed: u64,
) -> Selection {
    if candidates.len() == 1 {
        return Selection { model: candidates[0].clone(), scores: vec![], warnings: vec![] };
    }
    let k = cv_folds.min(train.n1().min(train.n0()));
    let folds = make_folds(train, k, rng::derive_seed(seed, &[0xF])).map_err(|e| e.to_string());
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    let mut warnings = Vec::new();
    for (c, cand) in candidates.iter().enumerate() {
        let score = folds.as_ref().map_err(Clone::clone).and_then(|folds| {
            let learner = Learner { candidates: vec![cand.clone()], grid: grid.clone(), cv_folds };
            estimate_crossfit(train, folds, &AdjusterPlan::Learned(learner), rng::derive_seed(seed, &[c as u64]))
                .map(|cf| match side {
                    Side::Lower => cf.estimate.theta_l,
                    Side::Upper => cf.estimate.theta_u,
                })
                .map_err(|e| e.to_string())
        });
        match score {
            Ok(v) => {
                let better = match (best, side) {
                    (None, _) => true,
                    (Some((_, b)), Side::Lower) => v > b,
                    (Some((_, b)), Side::Upper) => v < b,
                };
                if better {
                    best = Some((c, v));
                }
                scores.push((cand.name(), Some(v)));
            }
            Err(e) => {
                warnings.push(format!("model selection: {} excluded ({e})", cand.name()));
                scores.push((cand.name(), None));
            }
        }
    }
    let model = match best {
        Some((c, _)) => candidates[c].clone(),
        None => {
            warnings.push("model selection: every candidate failed; using the constant model".into());
            Arc::new(ModelSpec::Constant)
        }
    };
    Selection { model, scores, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arm(x: Vec<f64>, p: usize, y: Vec<f64>) -> ArmData {
        ArmData { x, p, y }
    }

    struct Fixed(CondCdf);

    impl ConditionalCdfModel for Fixed {
        fn conditional(&self, _x: &[f64]) -> CondCdf {
            self.0.clone()
        }
    }

    fn point(v: f64) -> Fixed {
        Fixed(CondCdf::Ecdf { sorted: vec![v].into(), shift: 0.0 })
    }

    #[test]
    fn constant_model_is_ecdf() {
        let a = arm(vec![0.0, 5.0, 9.0], 1, vec![1.0, 2.0, 3.0]);
        let m = ModelSpec::Constant.fit(&a, 0).unwrap().model;
        assert_eq!(m.eval_cdf(2.0, &[123.0]), 2.0 / 3.0);
    }

    #[test]
    fn quantile_interpolation_rule() {
        // F^-1(0.2) = 1 and F^-1(0.3) = 2 with the knots in between on the chord.
        let knots: Vec<f64> = (0..=100)
            .map(|k| match k {
                0..=20 => k as f64 / 20.0,
                21..=29 => 1.0 + (k - 20) as f64 / 10.0,
                _ => 2.0 + (k - 30) as f64,
            })
            .collect();
        let c = CondCdf::Interp { knots };
        assert!((c.eval(1.5) - 0.25).abs() < 1e-12);
        assert!((c.eval(1.05) - 0.205).abs() < 1e-12);
        assert_eq!(c.eval(-1.0), 0.0);
        assert_eq!(c.eval(100.0), 1.0);
    }

    #[test]
    fn tied_quantiles_take_midpoint_tau() {
        let mut knots: Vec<f64> = (0..=100).map(|k| k as f64).collect();
        knots[40..=60].fill(40.0);
        let c = CondCdf::Interp { knots };
        assert!((c.eval(40.0) - 0.5).abs() < 1e-12);
        assert!(c.eval(39.999) <= c.eval(40.0) && c.eval(40.0) <= c.eval(40.001));
    }

    #[test]
    fn zero_shift_location_model_is_residual_ecdf() {
        let c = CondCdf::Ecdf { sorted: vec![-1.0, 0.0, 2.0].into(), shift: 0.0 };
        assert_eq!(c.eval(0.0), 2.0 / 3.0);
        assert_eq!(c.eval(-1.5), 0.0);
    }

    #[test]
    fn knn_k_larger_than_arm_fails() {
        let a = arm(vec![0.0, 1.0], 1, vec![1.0, 2.0]);
        assert!(matches!(ModelSpec::KnnLocShift { k: Some(5) }.fit(&a, 0), Err(Error::Fit(_))));
    }

    #[test]
    fn constant_covariates_fall_back() {
        let a = arm(vec![1.0, 1.0, 1.0], 1, vec![1.0, 2.0, 3.0]);
        let f = ModelSpec::KnnLocShift { k: Some(2) }.fit(&a, 0).unwrap();
        assert_eq!(f.warnings.len(), 1);
        assert!(f.model.covariate_free());
    }

    #[test]
    fn ridge_recovers_linear_mean() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 3.0 * v).collect();
        let a = arm(x, 1, y);
        let m = ModelSpec::RidgeLocShift { lambda: Some(0.0) }.fit(&a, 0).unwrap().model;
        // Residuals are all ~0, so the conditional CDF jumps at 2 + 3 x.
        assert!(m.eval_cdf(2.0 + 3.0 * 0.5 - 1e-6, &[0.5]) < 0.05);
        assert!(m.eval_cdf(2.0 + 3.0 * 0.5 + 1e-6, &[0.5]) > 0.95);
        let auto = ModelSpec::RidgeLocShift { lambda: None }.fit(&a, 0).unwrap().model;
        assert!(auto.eval_cdf(3.5 + 0.1, &[0.5]) > 0.9);
    }

    #[test]
    fn identical_models_pick_smallest_grid_point() {
        let grid = vec![-3.0, -1.0, 0.5, 2.0];
        let m = ConstantModel::new(&[0.0, 1.0]);
        let (l, u) = extract_adjusters(&m, &m, &arm(vec![0.0, 0.0], 1, vec![0.0; 2]), &grid).unwrap();
        assert_eq!((l, u), (vec![-3.0; 2], vec![-3.0; 2]));
    }

    #[test]
    fn deterministic_outcomes_pick_first_point_in_gap() {
        let grid: Vec<f64> = (0..80).map(|k| k as f64 * 0.1).collect();
        let (l, u) = extract_adjusters(&point(2.0), &point(5.0), &arm(vec![0.0], 1, vec![0.0]), &grid).unwrap();
        assert!((l[0] - 2.0).abs() < 1e-9, "{}", l[0]);
        assert_eq!(u[0], 0.0);
        let c1 = point(2.0).conditional(&[]);
        let c0 = point(5.0).conditional(&[]);
        assert_eq!(c1.eval(l[0]) - c0.eval(l[0]), 1.0);
    }

    #[test]
    fn empty_grid_is_config_error() {
        let m = ConstantModel::new(&[0.0]);
        assert!(matches!(extract_adjusters(&m, &m, &arm(vec![0.0], 1, vec![0.0]), &[]), Err(Error::Config(_))));
        assert!(GridSpec::RandomNormal { size: 0 }.draw(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn grids_are_sorted_and_seeded() {
        let g = GridSpec::default().draw(-2.0, 3.0, 42).unwrap();
        assert_eq!(g.len(), 10_000);
        assert!(g.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(g, GridSpec::default().draw(-2.0, 3.0, 42).unwrap());
        let sd = (g.iter().map(|v| v * v).sum::<f64>() / g.len() as f64).sqrt();
        assert!((sd - 5.0).abs() < 0.2);
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in ["constant", "knn_loc_shift:k=15", "ridge_loc_shift:lambda=auto", "knn_quantile:k=25"] {
            let m: ModelSpec = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert_eq!("knn_loc_shift".parse::<ModelSpec>().unwrap(), ModelSpec::KnnLocShift { k: None });
        assert!("forest".parse::<ModelSpec>().is_err());
        assert!("knn_quantile:depth=3".parse::<ModelSpec>().is_err());
    }

    #[test]
    fn learners_match_sorted_and_pointwise_evaluation() {
        let n = 60;
        let x: Vec<f64> = (0..2 * n).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let y: Vec<f64> = (0..n).map(|i| x[2 * i] - x[2 * i + 1] + ((i * 31) % 7) as f64 * 0.1).collect();
        let a = arm(x, 2, y);
        let grid = GridSpec::Equispaced { size: 300 }.draw(-3.0, 3.0, 0).unwrap();
        for spec in ["knn_loc_shift", "ridge_loc_shift", "knn_quantile:k=12", "constant"] {
            let m = spec.parse::<ModelSpec>().unwrap().fit(&a, 0).unwrap().model;
            let c = m.conditional(&[0.2, -0.4]);
            let mut out = vec![0.0; grid.len()];
            c.eval_sorted(&grid, &mut out);
            for (o, &t) in out.iter().zip(&grid) {
                assert_eq!(*o, c.eval(t), "{spec}");
            }
        }
    }

    proptest! {
        #[test]
        fn conditional_cdfs_are_monotone(
            seed in 0u64..1000,
            t in -4.0f64..4.0,
            gap in 0.0f64..3.0,
            x0 in -2.0f64..2.0,
            x1 in -2.0f64..2.0,
        ) {
            let n = 40;
            let xs: Vec<f64> = (0..2 * n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 250.0 - 2.0).collect();
            let ys: Vec<f64> = (0..n).map(|i| xs[2 * i] + ((i as u64 * 97 + seed) % 13) as f64 / 6.0 - 1.0).collect();
            let a = arm(xs, 2, ys);
            for spec in ["constant", "knn_loc_shift", "ridge_loc_shift", "knn_quantile:k=9"] {
                let m = spec.parse::<ModelSpec>().unwrap().fit(&a, 0).unwrap().model;
                let lo = m.eval_cdf(t, &[x0, x1]);
                let hi = m.eval_cdf(t + gap, &[x0, x1]);
                prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
                prop_assert!(lo <= hi, "{spec}: F({t}) = {lo} > F({}) = {hi}", t + gap);
            }
        }
    }
}
