//! Simulation study: a Gaussian covariate design with quadratic potential
//! outcomes, brute-force oracles, and a Monte Carlo runner for power, size and
//! interval length.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cond_cdf::{CondCdf, GridSpec, ModelFactory, ModelSpec};
use crate::cross_fit::{
    bounds_from_adjusters, estimate_crossfit, one_sided_cis, sjls_estimate, AdjusterPlan, CrossFit, Learner,
};
use crate::error::{Error, Result};
use crate::finite_sample::{estimate_split, SplitPlan};
use crate::model::{make_folds, Adjuster, AdjusterLabel, Sample};
use crate::rng;

/// Design of the simulation study.
#[derive(Clone, Debug, PartialEq)]
pub struct DgpSpec {
    pub covariance: DMatrix<f64>,
    pub beta0: DVector<f64>,
    pub theta0: DMatrix<f64>,
    pub beta_tau: DVector<f64>,
    pub theta_tau: DMatrix<f64>,
    /// Constant added to every individual effect.
    pub effect_shift: f64,
    pub treat_prob: f64,
}

impl Default for DgpSpec {
    /// Twenty covariates; `X1`, `X2` independent of the rest, which follow a
    /// stationary AR(1) correlation `0.5^|i-j|`.
    fn default() -> Self {
        let d = 20;
        let covariance = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else if i < 2 || j < 2 {
                0.0
            } else {
                0.5f64.powi((i as i32 - j as i32).abs())
            }
        });
        let mut beta0 = DVector::zeros(d);
        beta0[0] = 3.0;
        beta0[1] = 1.0;
        for k in 1..=6 {
            beta0[d - 7 + k] = 3f64.powi(-(k as i32));
        }
        // 1-based indices in the sign pattern; the parity is the same.
        let theta0 = DMatrix::from_fn(d, d, |i, j| if (i + j) % 2 == 0 { 0.2 } else { -0.2 });
        DgpSpec {
            covariance,
            beta0,
            theta0,
            beta_tau: DVector::from_element(d, 1.0),
            theta_tau: DMatrix::from_element(d, d, 0.2),
            effect_shift: -1.0,
            treat_prob: 0.5,
        }
    }
}

impl DgpSpec {
    pub fn dim(&self) -> usize {
        self.covariance.nrows()
    }

    /// The same design with no treatment effect at all.
    pub fn without_effect(&self) -> Self {
        let d = self.dim();
        DgpSpec {
            beta_tau: DVector::zeros(d),
            theta_tau: DMatrix::zeros(d, d),
            effect_shift: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let square = |m: &DMatrix<f64>, name: &str| -> Result<()> {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::config(format!("{name} is {}x{}, expected {d}x{d}", m.nrows(), m.ncols())));
            }
            if (0..d).any(|i| (0..i).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * (1.0 + m[(i, j)].abs()))) {
                return Err(Error::config(format!("{name} is not symmetric")));
            }
            Ok(())
        };
        square(&self.covariance, "covariance")?;
        square(&self.theta0, "theta0")?;
        square(&self.theta_tau, "theta_tau")?;
        if self.beta0.len() != d || self.beta_tau.len() != d {
            return Err(Error::config(format!("coefficient vectors must have length {d}")));
        }
        if !(self.treat_prob > 0.0 && self.treat_prob < 1.0) {
            return Err(Error::config("treat_prob must lie in (0, 1)"));
        }
        if !self.effect_shift.is_finite() {
            return Err(Error::config("effect_shift must be finite"));
        }
        Ok(())
    }

    fn compile(&self) -> Result<Compiled> {
        self.validate()?;
        let l = cholesky_lower(&self.covariance)?;
        let d = self.dim();
        let chol_rows = (0..d)
            .map(|i| (0..=i).filter(|&j| l[(i, j)] != 0.0).map(|j| (j, l[(i, j)])).collect())
            .collect();
        Ok(Compiled {
            d,
            chol_rows,
            y0: Form::new(0.0, &self.beta0, &self.theta0),
            effect: Form::new(self.effect_shift, &self.beta_tau, &self.theta_tau),
            treat_prob: self.treat_prob,
        })
    }
}

fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (m + m.transpose()) * 0.5;
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c.l());
    }
    // Singular but positive semidefinite: a vanishing ridge.
    let jitter = 1e-12 * sym.trace().abs().max(1.0);
    let n = sym.nrows();
    (sym + DMatrix::identity(n, n) * jitter)
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::config("covariance is not positive semidefinite"))
}

/// `c + b'x + sum_k lambda_k (v_k'x)^2`.
#[derive(Clone, Debug)]
struct Form {
    c: f64,
    b: Vec<f64>,
    terms: Vec<(f64, Vec<f64>)>,
}

impl Form {
    fn new(c: f64, b: &DVector<f64>, theta: &DMatrix<f64>) -> Self {
        let sym = (theta + theta.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let terms = (0..eig.eigenvalues.len())
            .filter(|&k| eig.eigenvalues[k].abs() > 1e-12 * scale)
            .map(|k| (eig.eigenvalues[k], eig.eigenvectors.column(k).iter().copied().collect()))
            .collect();
        Form { c, b: b.iter().copied().collect(), terms }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.c + dot(&self.b, x);
        for (lambda, u) in &self.terms {
            let a = dot(u, x);
            v += lambda * a * a;
        }
        v
    }

    /// The form given the first `p` coordinates, with the rest written as
    /// `mu(o) + L z`.
    fn condition(&self, p: usize, m: &DMatrix<f64>, l: &DMatrix<f64>) -> CondForm {
        let split = |v: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let (vo, vh) = v.split_at(p);
            let vh = DVector::from_column_slice(vh);
            let on_o = DVector::from_column_slice(vo) + m.transpose() * &vh;
            let on_z = l.transpose() * &vh;
            (on_o.iter().copied().collect(), on_z.iter().copied().collect())
        };
        let (b_o, w_b) = split(&self.b);
        let terms = self
            .terms
            .iter()
            .map(|(lambda, u)| {
                let (a, w) = split(u);
                (*lambda, a, w)
            })
            .collect();
        CondForm { c: self.c, b_o, w_b, terms }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

struct CondForm {
    c: f64,
    b_o: Vec<f64>,
    w_b: Vec<f64>,
    terms: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

impl CondForm {
    /// Projections of the inner draws onto each direction, `[dir][r]`.
    fn project(&self, z: &[Vec<f64>]) -> Vec<Vec<f64>> {
        std::iter::once(&self.w_b)
            .chain(self.terms.iter().map(|t| &t.2))
            .map(|w| z.iter().map(|zr| dot(w, zr)).collect())
            .collect()
    }

    fn draws(&self, o: &[f64], proj: &[Vec<f64>], out: &mut [f64]) {
        let base = self.c + dot(&self.b_o, o);
        let a: Vec<f64> = self.terms.iter().map(|t| dot(&t.1, o)).collect();
        for (r, v) in out.iter_mut().enumerate() {
            let mut y = base + proj[0][r];
            for (k, (lambda, _, _)) in self.terms.iter().enumerate() {
                let s = a[k] + proj[k + 1][r];
                y += lambda * s * s;
            }
            *v = y;
        }
    }
}

struct Compiled {
    d: usize,
    chol_rows: Vec<Vec<(usize, f64)>>,
    y0: Form,
    effect: Form,
    treat_prob: f64,
}

impl Compiled {
    fn draw_x<R: Rng>(&self, r: &mut R, z: &mut [f64], x: &mut [f64]) {
        for v in z.iter_mut() {
            *v = r.sample(StandardNormal);
        }
        for (i, row) in self.chol_rows.iter().enumerate() {
            x[i] = row.iter().map(|&(j, l)| l * z[j]).sum();
        }
    }
}

/// Potential outcomes behind a simulated sample. Only oracle operations read
/// them.
#[derive(Clone, Debug)]
pub struct HiddenOutcomes {
    y0: Vec<f64>,
    effect: Vec<f64>,
}

impl HiddenOutcomes {
    pub fn len(&self) -> usize {
        self.y0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y0.is_empty()
    }

    /// In-sample share of units with `Y(1) - Y(0) <= delta`.
    pub fn realized_theta(&self, delta: f64) -> f64 {
        self.effect.iter().filter(|&&e| e <= delta).count() as f64 / self.len() as f64
    }

    /// In-sample mean of `Y(1) - Y(0)`.
    pub fn mean_effect(&self) -> f64 {
        self.effect.iter().sum::<f64>() / self.len() as f64
    }
}

pub struct DgpDraw {
    /// All covariates observed.
    pub sample: Sample,
    pub hidden: HiddenOutcomes,
}

impl DgpDraw {
    /// The sample restricted to the first `p` covariates.
    pub fn observe(&self, p: usize) -> Result<Sample> {
        let d = self.sample.p();
        if p > d {
            return Err(Error::config(format!("observed p = {p} exceeds the design dimension {d}")));
        }
        if p == d {
            return Ok(self.sample.clone());
        }
        let x: Vec<f64> = self.sample.x_flat().chunks(d.max(1)).flat_map(|row| row[..p].iter().copied()).collect();
        Sample::from_flat(self.sample.y().to_vec(), self.sample.d().to_vec(), x, p)
    }
}

pub fn draw_dgp(spec: &DgpSpec, n: usize, seed: u64) -> Result<DgpDraw> {
    if n < 2 {
        return Err(Error::config(format!("n = {n} must be at least 2")));
    }
    let dgp = spec.compile()?;
    let mut r = rng::stream(seed, &[0xD6B]);
    let d = dgp.d;
    let (mut z, mut row) = (vec![0.0; d], vec![0.0; d]);
    let mut x = Vec::with_capacity(n * d);
    let (mut y, mut treat) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut y0s, mut effects) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        dgp.draw_x(&mut r, &mut z, &mut row);
        let y0 = dgp.y0.eval(&row);
        let effect = dgp.effect.eval(&row);
        let t = r.random::<f64>() < dgp.treat_prob;
        x.extend_from_slice(&row);
        y.push(if t { y0 + effect } else { y0 });
        treat.push(t);
        y0s.push(y0);
        effects.push(effect);
    }
    Ok(DgpDraw { sample: Sample::from_flat(y, treat, x, d)?, hidden: HiddenOutcomes { y0: y0s, effect: effects } })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub se: f64,
    pub reps: usize,
}

pub const MIN_THETA0_REPS: usize = 1_000_000;
const CHUNK: usize = 1 << 16;

/// Monte Carlo value of `P(Y(1) - Y(0) <= delta)`.
pub fn oracle_theta0(spec: &DgpSpec, delta: f64, reps: usize, seed: u64) -> Result<OracleValue> {
    if reps < MIN_THETA0_REPS {
        return Err(Error::config(format!("oracle needs at least {MIN_THETA0_REPS} draws, got {reps}")));
    }
    let dgp = spec.compile()?;
    let chunks = reps.div_ceil(CHUNK);
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, &[0x7E7A, c as u64]);
            let m = CHUNK.min(reps - c * CHUNK);
            let (mut z, mut x) = (vec![0.0; dgp.d], vec![0.0; dgp.d]);
            let mut hits = 0;
            for _ in 0..m {
                dgp.draw_x(&mut r, &mut z, &mut x);
                hits += usize::from(dgp.effect.eval(&x) <= delta);
            }
            hits
        })
        .sum();
    let value = hits as f64 / reps as f64;
    Ok(OracleValue { value, se: (value * (1.0 - value) / reps as f64).sqrt(), reps })
}

/// Both potential outcomes for `reps` independent design draws, as
/// `(Y(1), Y(0))`. Used for population curves.
pub fn oracle_potential_outcomes(spec: &DgpSpec, reps: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let dgp = spec.compile()?;
    let chunks = reps.div_ceil(CHUNK);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, &[0x9070, c as u64]);
            let m = CHUNK.min(reps - c * CHUNK);
            let (mut z, mut x) = (vec![0.0; dgp.d], vec![0.0; dgp.d]);
            let (mut y1, mut y0) = (Vec::with_capacity(m), Vec::with_capacity(m));
            for _ in 0..m {
                dgp.draw_x(&mut r, &mut z, &mut x);
                let base = dgp.y0.eval(&x);
                y0.push(base);
                y1.push(base + dgp.effect.eval(&x));
            }
            (y1, y0)
        })
        .collect();
    let mut y1 = Vec::with_capacity(reps);
    let mut y0 = Vec::with_capacity(reps);
    for (a, b) in parts {
        y1.extend(a);
        y0.extend(b);
    }
    Ok((y1, y0))
}

pub const MIN_INNER_REPS: usize = 100;
/// Offset placing non-separating units beyond every evaluation point.
const FAR: f64 = 1e6;

/// Sharp adjusters for the covariates observed in `sample` (its first
/// `sample.p()` design coordinates). With every covariate observed the
/// potential outcomes are known and a separating point is returned;
/// otherwise the unobserved block is drawn `inner_reps` times from its
/// conditional law and the arg-extrema over `grid` are taken.
pub fn oracle_adjuster(
    spec: &DgpSpec,
    sample: &Sample,
    inner_reps: usize,
    grid: &[f64],
    seed: u64,
) -> Result<(Adjuster, Adjuster)> {
    if inner_reps < MIN_INNER_REPS {
        return Err(Error::config(format!("oracle needs inner_reps >= {MIN_INNER_REPS}, got {inner_reps}")));
    }
    let dgp = spec.compile()?;
    let p = sample.p();
    if p > dgp.d {
        return Err(Error::config(format!("observed p = {p} exceeds the design dimension {}", dgp.d)));
    }
    let n = sample.len();
    let (lower, upper): (Vec<f64>, Vec<f64>) = if p == dgp.d {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let x = sample.x_row(i);
                let y0 = dgp.y0.eval(x);
                let y1 = y0 + dgp.effect.eval(x);
                let mid = 0.5 * (y0 + y1);
                let lo = if y1 < y0 { mid } else if y1 == y0 { y0 } else { y0.min(y1) - FAR };
                let hi = if y1 > y0 { mid } else if y1 == y0 { y0 } else { y0.max(y1) + FAR };
                (lo, hi)
            })
            .unzip()
    } else {
        if grid.is_empty() {
            return Err(Error::config("argmax grid is empty"));
        }
        let cond = Conditional::new(spec, &dgp, p)?;
        let mut r = rng::stream(seed, &[0x0AC1]);
        let q = dgp.d - p;
        let z: Vec<Vec<f64>> =
            (0..inner_reps).map(|_| (0..q).map(|_| r.sample(StandardNormal)).collect()).collect();
        let proj0 = cond.y0.project(&z);
        let proj_e = cond.effect.project(&z);
        let per_row = |o: &[f64]| -> (f64, f64) {
            let mut y0 = vec![0.0; inner_reps];
            let mut e = vec![0.0; inner_reps];
            cond.y0.draws(o, &proj0, &mut y0);
            cond.effect.draws(o, &proj_e, &mut e);
            let mut y1: Vec<f64> = y0.iter().zip(&e).map(|(a, b)| a + b).collect();
            y0.sort_by(f64::total_cmp);
            y1.sort_by(f64::total_cmp);
            let (mut f1, mut f0) = (vec![0.0; grid.len()], vec![0.0; grid.len()]);
            CondCdf::Ecdf { sorted: Arc::from(y1), shift: 0.0 }.eval_sorted(grid, &mut f1);
            CondCdf::Ecdf { sorted: Arc::from(y0), shift: 0.0 }.eval_sorted(grid, &mut f0);
            let (mut hi, mut lo) = ((f64::NEG_INFINITY, grid[0]), (f64::INFINITY, grid[0]));
            for (k, &t) in grid.iter().enumerate() {
                let d = f1[k] - f0[k];
                if d > hi.0 {
                    hi = (d, t);
                }
                if d < lo.0 {
                    lo = (d, t);
                }
            }
            (hi.1, lo.1)
        };
        if p == 0 {
            let (l, u) = per_row(&[]);
            (vec![l; n], vec![u; n])
        } else {
            sample.x_flat().par_chunks(p).map(per_row).unzip()
        }
    };
    Ok((Adjuster::new(lower, AdjusterLabel::Oracle)?, Adjuster::new(upper, AdjusterLabel::Oracle)?))
}

struct Conditional {
    y0: CondForm,
    effect: CondForm,
}

impl Conditional {
    fn new(spec: &DgpSpec, dgp: &Compiled, p: usize) -> Result<Self> {
        let s = &spec.covariance;
        let (d, q) = (dgp.d, dgp.d - p);
        let s_hh = s.view((p, p), (q, q)).into_owned();
        let (m, cov) = if p == 0 {
            (DMatrix::zeros(q, 0), s_hh)
        } else {
            let s_oo = s.view((0, 0), (p, p)).into_owned();
            let s_oh = s.view((0, p), (p, q)).into_owned();
            let chol = s_oo
                .cholesky()
                .ok_or_else(|| Error::config("observed covariance block is singular"))?;
            let m = chol.solve(&s_oh).transpose();
            let cov = &s_hh - &m * &s_oh;
            (m, cov)
        };
        debug_assert_eq!(m.ncols() + q, d);
        let l = cholesky_lower(&cov)?;
        Ok(Conditional { y0: dgp.y0.condition(p, &m, &l), effect: dgp.effect.condition(p, &m, &l) })
    }
}

/// How adjusters are obtained in a simulation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CellModel {
    NoCovariates,
    Oracle,
    /// Built-in learners standing in for the study's machine-learning models.
    Learned(Vec<ModelSpec>),
}

impl fmt::Display for CellModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CellModel::NoCovariates => write!(f, "no_covariates"),
            CellModel::Oracle => write!(f, "oracle"),
            CellModel::Learned(specs) => {
                let names: Vec<String> = specs.iter().map(ToString::to_string).collect();
                write!(f, "{}", names.join("+"))
            }
        }
    }
}

impl FromStr for CellModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "no_covariates" | "none" => Ok(CellModel::NoCovariates),
            "oracle" => Ok(CellModel::Oracle),
            other => {
                let specs = other.split('+').map(str::parse).collect::<Result<Vec<ModelSpec>>>()?;
                Ok(CellModel::Learned(specs))
            }
        }
    }
}

impl TryFrom<String> for CellModel {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CellModel> for String {
    fn from(m: CellModel) -> String {
        m.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    SampleSplit,
    CrossFit,
    Sjls,
}

pub const ESTIMATOR_NAMES: [&str; 3] = ["sample-split", "cross-fit", "sjls"];

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::SampleSplit => "sample-split",
            Estimator::CrossFit => "cross-fit",
            Estimator::Sjls => "sjls",
        })
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sample-split" => Ok(Estimator::SampleSplit),
            "cross-fit" => Ok(Estimator::CrossFit),
            "sjls" => Ok(Estimator::Sjls),
            other => Err(Error::config(format!(
                "unknown estimator '{other}'; expected one of {}",
                ESTIMATOR_NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub n: usize,
    pub p: usize,
    pub model: CellModel,
    pub estimator: Estimator,
}

impl Cell {
    pub fn new(n: usize, p: usize, model: CellModel, estimator: Estimator) -> Self {
        Cell { n, p, model, estimator }
    }

    /// Every combination of the given sizes, dimensions, models and estimators.
    pub fn grid(ns: &[usize], ps: &[usize], models: &[CellModel], estimators: &[Estimator]) -> Vec<Cell> {
        let mut cells = Vec::new();
        for model in models {
            for &n in ns {
                for &estimator in estimators {
                    for &p in ps {
                        cells.push(Cell::new(n, p, model.clone(), estimator));
                    }
                }
            }
        }
        cells
    }
}

/// Parses cell lines `n,p,model,estimator`. Blank lines, `#` comments and a
/// header line starting with `n,` are skipped.
pub fn parse_cells(text: &str) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with("n,") {
            continue;
        }
        let bad = |msg: String| Error::Parse { row: k + 1, msg };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(format!("expected n,p,model,estimator, found {} fields", f.len())));
        }
        let n: usize = f[0].parse().map_err(|_| bad(format!("bad n '{}'", f[0])))?;
        let p: usize = f[1].parse().map_err(|_| bad(format!("bad p '{}'", f[1])))?;
        let model = f[2].parse().map_err(|e: Error| bad(e.to_string()))?;
        let estimator = f[3].parse().map_err(|e: Error| bad(e.to_string()))?;
        cells.push(Cell::new(n, p, model, estimator));
    }
    if cells.is_empty() {
        return Err(Error::config("no simulation cells given"));
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
    pub k_folds: usize,
    /// Known target value; estimated by brute force when absent.
    pub theta0: Option<f64>,
    pub theta0_reps: usize,
    pub inner_reps: usize,
    pub grid: GridSpec,
    pub cv_folds: usize,
    pub aux_fraction: f64,
    /// Treatment probability used by the comparison estimator.
    pub sjls_propensity: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            reps: 1000,
            alpha: 0.05,
            seed: 0,
            k_folds: 5,
            theta0: None,
            theta0_reps: 10_000_000,
            inner_reps: 2000,
            grid: GridSpec::default(),
            cv_folds: 5,
            aux_fraction: 0.5,
            sjls_propensity: 0.5,
        }
    }
}

pub const RECOMMENDED_MIN_REPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub model: CellModel,
    pub estimator: Estimator,
    pub n: usize,
    pub p: usize,
    /// Successful replications.
    pub reps: usize,
    pub failures: usize,
    pub first_error: Option<String>,
    /// Share of replications whose lower one-sided interval excludes 0.
    pub reject_zero: f64,
    /// Share whose lower one-sided interval excludes the true value.
    pub reject_theta0: f64,
    /// Mean distance between the two one-sided interval endpoints.
    pub avg_length: f64,
    pub mean_theta_l: f64,
    pub mean_theta_u: f64,
    pub learner_substituted: bool,
}

impl CellResult {
    /// Monte Carlo standard error of a rate in this cell.
    pub fn rate_se(&self, rate: f64) -> f64 {
        if self.reps == 0 {
            return f64::NAN;
        }
        (rate * (1.0 - rate) / self.reps as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub version: String,
    pub config: McConfig,
    pub theta0: f64,
    /// Zero when the target value was supplied.
    pub theta0_se: f64,
    /// Replication `r` at size `n` draws its data from
    /// `derive_seed(seed, [n, r])`, shared by every cell with that `n`.
    pub seed_rule: String,
    pub cells: Vec<CellResult>,
    pub notes: Vec<String>,
}

impl McReport {
    pub fn cell(&self, n: usize, p: usize, model: &CellModel, estimator: Estimator) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.n == n && c.p == p && &c.model == model && c.estimator == estimator)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "model",
            "estimator",
            "n",
            "p",
            "reps",
            "failures",
            "reject_zero",
            "reject_theta0",
            "avg_length",
            "mean_theta_l",
            "mean_theta_u",
            "learner_substituted",
        ])?;
        for c in &self.cells {
            out.write_record([
                c.model.to_string(),
                c.estimator.to_string(),
                c.n.to_string(),
                c.p.to_string(),
                c.reps.to_string(),
                c.failures.to_string(),
                c.reject_zero.to_string(),
                c.reject_theta0.to_string(),
                c.avg_length.to_string(),
                c.mean_theta_l.to_string(),
                c.mean_theta_u.to_string(),
                c.learner_substituted.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Outcome {
    reject_zero: bool,
    reject_theta0: bool,
    length: f64,
    theta_l: f64,
    theta_u: f64,
}

struct Context<'a> {
    spec: &'a DgpSpec,
    cfg: &'a McConfig,
    theta0: f64,
}

/// Runs every cell for `cfg.reps` replications. Failures are counted per
/// cell; only invalid configurations are errors.
pub fn run_table(spec: &DgpSpec, cells: &[Cell], cfg: &McConfig) -> Result<McReport> {
    spec.validate()?;
    if cells.is_empty() {
        return Err(Error::config("no simulation cells given"));
    }
    if cfg.reps == 0 {
        return Err(Error::config("reps must be positive"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 0.5) {
        return Err(Error::config(format!("alpha = {} must lie in (0, 0.5)", cfg.alpha)));
    }
    for c in cells {
        if c.p > spec.dim() {
            return Err(Error::config(format!("cell p = {} exceeds the design dimension {}", c.p, spec.dim())));
        }
        if c.n < 2 * cfg.k_folds {
            return Err(Error::config(format!("cell n = {} is too small for {} folds", c.n, cfg.k_folds)));
        }
        if let CellModel::Learned(specs) = &c.model {
            if specs.is_empty() {
                return Err(Error::config("learned cell without models"));
            }
        }
    }
    if cfg.inner_reps < MIN_INNER_REPS && cells.iter().any(|c| c.model == CellModel::Oracle) {
        return Err(Error::config(format!("inner_reps must be at least {MIN_INNER_REPS}")));
    }
    let mut notes = Vec::new();
    if cfg.reps < RECOMMENDED_MIN_REPS {
        notes.push(format!("only {} replications; rates are coarse", cfg.reps));
    }
    let (theta0, theta0_se) = match cfg.theta0 {
        Some(t) => (t, 0.0),
        None => {
            let o = oracle_theta0(spec, 0.0, cfg.theta0_reps, rng::derive_seed(cfg.seed, &[0x7E7A]))?;
            (o.value, o.se)
        }
    };
    let ctx = Context { spec, cfg, theta0 };

    let mut by_n: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, c) in cells.iter().enumerate() {
        by_n.entry(c.n).or_default().push(k);
    }
    let mut tallies: Vec<Vec<std::result::Result<Outcome, String>>> = vec![Vec::new(); cells.len()];
    for (&n, idx) in &by_n {
        let cell_refs: Vec<&Cell> = idx.iter().map(|&k| &cells[k]).collect();
        let per_rep: Vec<Vec<std::result::Result<Outcome, String>>> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| run_replication(&ctx, n, r, &cell_refs))
            .collect();
        for rep in per_rep {
            for (j, o) in rep.into_iter().enumerate() {
                tallies[idx[j]].push(o);
            }
        }
    }

    let results = cells
        .iter()
        .zip(tallies)
        .map(|(c, outs)| {
            let ok: Vec<Outcome> = outs.iter().filter_map(|o| o.as_ref().ok().copied()).collect();
            let first_error = outs.iter().find_map(|o| o.as_ref().err().cloned());
            let m = ok.len() as f64;
            let mean = |f: &dyn Fn(&Outcome) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(f).sum::<f64>() / m };
            CellResult {
                model: c.model.clone(),
                estimator: c.estimator,
                n: c.n,
                p: c.p,
                reps: ok.len(),
                failures: outs.len() - ok.len(),
                first_error,
                reject_zero: mean(&|o| f64::from(u8::from(o.reject_zero))),
                reject_theta0: mean(&|o| f64::from(u8::from(o.reject_theta0))),
                avg_length: mean(&|o| o.length),
                mean_theta_l: mean(&|o| o.theta_l),
                mean_theta_u: mean(&|o| o.theta_u),
                learner_substituted: matches!(c.model, CellModel::Learned(_)),
            }
        })
        .collect();
    Ok(McReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        theta0,
        theta0_se,
        seed_rule: "replication r at size n uses derive_seed(seed, [n, r]) for its data, folds, split and fits".into(),
        cells: results,
        notes,
    })
}

fn run_replication(ctx: &Context<'_>, n: usize, r: usize, cells: &[&Cell]) -> Vec<std::result::Result<Outcome, String>> {
    let rep_seed = rng::derive_seed(ctx.cfg.seed, &[n as u64, r as u64]);
    let draw = match draw_dgp(ctx.spec, n, rep_seed) {
        Ok(d) => d,
        Err(e) => return vec![Err(e.to_string()); cells.len()],
    };
    let mut samples: BTreeMap<usize, std::result::Result<Sample, String>> = BTreeMap::new();
    let mut crossfits: BTreeMap<(usize, String), std::result::Result<CrossFit, String>> = BTreeMap::new();
    let mut plans: BTreeMap<(usize, String), std::result::Result<AdjusterPlan, String>> = BTreeMap::new();
    cells
        .iter()
        .map(|cell| {
            let sample = samples
                .entry(cell.p)
                .or_insert_with(|| draw.observe(cell.p).map_err(|e| e.to_string()))
                .clone()?;
            let key = (cell.p, cell.model.to_string());
            let plan = plans
                .entry(key.clone())
                .or_insert_with(|| adjuster_plan(ctx, &sample, &cell.model, rep_seed).map_err(|e| e.to_string()))
                .clone()?;
            let cf = |crossfits: &mut BTreeMap<_, std::result::Result<CrossFit, String>>| {
                crossfits
                    .entry(key.clone())
                    .or_insert_with(|| {
                        let folds = make_folds(&sample, ctx.cfg.k_folds, rng::derive_seed(rep_seed, &[0xF0]))
                            .map_err(|e| e.to_string())?;
                        estimate_crossfit(&sample, &folds, &plan, rng::derive_seed(rep_seed, &[0xC5, cell.p as u64]))
                            .map_err(|e| e.to_string())
                    })
                    .clone()
            };
            evaluate(ctx, &sample, cell, &plan, rep_seed, || cf(&mut crossfits)).map_err(|e| e.to_string())
        })
        .collect()
}

fn adjuster_plan(ctx: &Context<'_>, sample: &Sample, model: &CellModel, rep_seed: u64) -> Result<AdjusterPlan> {
    match model {
        CellModel::NoCovariates => Ok(AdjusterPlan::Zero),
        CellModel::Oracle => {
            let grid = ctx.cfg.grid.draw(sample.y_lo(), sample.y_hi(), rng::derive_seed(rep_seed, &[0x6D]))?;
            let (lower, upper) = oracle_adjuster(
                ctx.spec,
                sample,
                ctx.cfg.inner_reps,
                &grid,
                rng::derive_seed(rep_seed, &[0x0AC1, sample.p() as u64]),
            )?;
            Ok(AdjusterPlan::Fixed { lower: lower.values().to_vec(), upper: upper.values().to_vec() })
        }
        CellModel::Learned(specs) => Ok(AdjusterPlan::Learned(Learner {
            candidates: specs.iter().map(|s| Arc::new(s.clone()) as Arc<dyn ModelFactory>).collect(),
            grid: ctx.cfg.grid.clone(),
            cv_folds: ctx.cfg.cv_folds,
        })),
    }
}

fn evaluate(
    ctx: &Context<'_>,
    sample: &Sample,
    cell: &Cell,
    plan: &AdjusterPlan,
    rep_seed: u64,
    crossfit: impl FnOnce() -> std::result::Result<CrossFit, String>,
) -> std::result::Result<Outcome, String> {
    let alpha = ctx.cfg.alpha;
    let n = sample.len();
    let (lower, upper, theta_l, theta_u) = match cell.estimator {
        Estimator::SampleSplit => {
            let split = SplitPlan::random(sample, ctx.cfg.aux_fraction, rng::derive_seed(rep_seed, &[0x5B]))
                .map_err(|e| e.to_string())?;
            let est = estimate_split(sample, &split, plan, alpha, rng::derive_seed(rep_seed, &[0x55, cell.p as u64]))
                .map_err(|e| e.to_string())?;
            (est.lower_ci.0, est.upper_ci.1, est.theta_l, est.theta_u)
        }
        Estimator::CrossFit => {
            let cf = crossfit()?;
            let ci = one_sided_cis(&cf.estimate, alpha, n).map_err(|e| e.to_string())?;
            (ci.lower_ci.0, ci.upper_ci.1, cf.estimate.raw_l, cf.estimate.raw_u)
        }
        Estimator::Sjls => {
            let cf = crossfit()?;
            let p = vec![ctx.cfg.sjls_propensity; n];
            let s = sjls_estimate(sample, &cf.adjusters.lower, &cf.adjusters.upper, &p).map_err(|e| e.to_string())?;
            let ci = one_sided_cis(&s.estimate, alpha, n).map_err(|e| e.to_string())?;
            (ci.lower_ci.0, ci.upper_ci.1, s.estimate.raw_l, s.estimate.raw_u)
        }
    };
    Ok(Outcome {
        reject_zero: lower > 0.0,
        reject_theta0: lower > ctx.theta0,
        length: upper - lower,
        theta_l,
        theta_u,
    })
}

/// Bounds from fixed adjusters evaluated on one sample, without folds.
pub fn bounds_with(sample: &Sample, lower: &Adjuster, upper: &Adjuster) -> Result<crate::cross_fit::BoundsEstimate> {
    Ok(bounds_from_adjusters(sample, lower.values(), upper.values())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecdf::makarov_bounds;

    #[test]
    fn default_design_is_consistent() {
        let s = DgpSpec::default();
        s.validate().unwrap();
        assert_eq!(s.dim(), 20);
        assert_eq!(s.beta0[0], 3.0);
        assert_eq!(s.beta0[1], 1.0);
        assert!(s.beta0.iter().skip(2).take(12).all(|&b| b == 0.0));
        assert!((s.beta0[14] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.beta0[19] - 3f64.powi(-6)).abs() < 1e-15);
        assert_eq!(s.theta0[(0, 1)], -0.2);
        assert_eq!(s.theta0[(2, 4)], 0.2);
        assert_eq!(s.covariance[(0, 2)], 0.0);
        assert_eq!(s.covariance[(3, 5)], 0.25);
        assert!(s.covariance.clone().cholesky().is_some());
    }

    #[test]
    fn forms_match_direct_evaluation() {
        let s = DgpSpec::default();
        let dgp = s.compile().unwrap();
        let x: Vec<f64> = (0..20).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let xv = DVector::from_column_slice(&x);
        let direct0 = s.beta0.dot(&xv) + (xv.transpose() * &s.theta0 * &xv)[(0, 0)];
        let direct_e = -1.0 + s.beta_tau.dot(&xv) + (xv.transpose() * &s.theta_tau * &xv)[(0, 0)];
        assert!((dgp.y0.eval(&x) - direct0).abs() < 1e-10);
        assert!((dgp.effect.eval(&x) - direct_e).abs() < 1e-10);
    }

    #[test]
    fn draws_follow_the_design() {
        let draw = draw_dgp(&DgpSpec::default(), 100_000, 5).unwrap();
        let s = &draw.sample;
        let col = |j: usize| -> Vec<f64> { (0..s.len()).map(|i| s.x_row(i)[j]).collect() };
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
            let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
            let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / n;
            cov / (va * vb).sqrt()
        };
        let (x1, x2, x3, x4) = (col(0), col(1), col(2), col(3));
        assert!(corr(&x1, &x3).abs() < 0.02);
        assert!(corr(&x2, &x3).abs() < 0.02);
        assert!((corr(&x3, &x4) - 0.5).abs() < 0.02);
        assert!((s.pi_hat() - 0.5).abs() < 0.01);
        for i in 0..s.len() {
            let y0 = draw.hidden.y0[i];
            let want = if s.treated(i) { y0 + draw.hidden.effect[i] } else { y0 };
            assert_eq!(s.y()[i], want);
        }
    }

    #[test]
    fn mean_effect_matches_closed_form() {
        // -1 + 0.2 * 1' Sigma 1, since X has mean zero.
        let s = DgpSpec::default();
        let want = -1.0 + 0.2 * s.covariance.sum();
        let draw = draw_dgp(&s, 400_000, 11).unwrap();
        let e = &draw.hidden.effect;
        let m = draw.hidden.mean_effect();
        let sd = (e.iter().map(|v| (v - m).powi(2)).sum::<f64>() / e.len() as f64).sqrt();
        assert!((m - want).abs() < 4.0 * sd / (e.len() as f64).sqrt(), "{m} vs {want}");
    }

    #[test]
    fn observe_keeps_leading_columns() {
        let draw = draw_dgp(&DgpSpec::default(), 50, 1).unwrap();
        let s10 = draw.observe(10).unwrap();
        assert_eq!(s10.p(), 10);
        assert_eq!(s10.x_row(7), &draw.sample.x_row(7)[..10]);
        assert!(draw.observe(21).is_err());
        assert!(draw_dgp(&DgpSpec::default(), 1, 0).is_err());
    }

    #[test]
    fn theta0_is_one_without_effects() {
        let s = DgpSpec::default().without_effect();
        let o = oracle_theta0(&s, 0.0, MIN_THETA0_REPS, 3).unwrap();
        assert_eq!(o.value, 1.0);
        assert_eq!(o.se, 0.0);
        assert!(oracle_theta0(&s, 0.0, 10, 3).is_err());
    }

    #[test]
    fn theta0_standard_error_scales() {
        let s = DgpSpec::default();
        let a = oracle_theta0(&s, 0.0, 1 << 20, 1).unwrap();
        let b = oracle_theta0(&s, 0.0, 1 << 21, 2).unwrap();
        assert!((a.se / b.se - 2f64.sqrt()).abs() < 0.01);
        assert!(a.se <= 5e-4);
        assert!((a.value - b.value).abs() < 5.0 * a.se);
    }

    /// One covariate, evaluated at `x = 1`: `Y(0) = y0`, `Y(1) = y1`.
    fn point_spec(y0: f64, y1: f64) -> DgpSpec {
        DgpSpec {
            covariance: DMatrix::identity(1, 1),
            beta0: DVector::from_element(1, y0),
            theta0: DMatrix::zeros(1, 1),
            beta_tau: DVector::zeros(1),
            theta_tau: DMatrix::zeros(1, 1),
            effect_shift: y1 - y0,
            treat_prob: 0.5,
        }
    }

    #[test]
    fn oracle_separates_known_outcomes() {
        let spec = point_spec(5.0, 2.0);
        let s = Sample::new(vec![0.0, 0.0], vec![true, false], vec![vec![1.0], vec![1.0]]).unwrap();
        let (l, u) = oracle_adjuster(&spec, &s, 100, &[0.0], 0).unwrap();
        assert_eq!(l.values(), &[3.5, 3.5]);
        assert_eq!(u.values(), &[5.0 + FAR, 5.0 + FAR]);
        assert_eq!(l.label(), AdjusterLabel::Oracle);

        let spec = point_spec(4.0, 4.0);
        let (l, u) = oracle_adjuster(&spec, &s, 100, &[0.0], 0).unwrap();
        assert_eq!((l.values()[0], u.values()[0]), (4.0, 4.0));
        assert!(oracle_adjuster(&spec, &s, 99, &[0.0], 0).is_err());
    }

    #[test]
    fn full_oracle_recovers_theta_in_sample() {
        let spec = DgpSpec::default();
        let draw = draw_dgp(&spec, 4000, 9).unwrap();
        let (l, u) = oracle_adjuster(&spec, &draw.sample, 100, &[0.0], 0).unwrap();
        let b = bounds_with(&draw.sample, &l, &u).unwrap();
        let truth = draw.hidden.realized_theta(0.0);
        assert!((b.theta_l - truth).abs() < 0.05);
        assert!((b.theta_u - truth).abs() < 0.05);
    }

    #[test]
    fn conditional_oracle_with_independent_hidden_block() {
        // Observing nothing: the conditional law is the marginal law.
        let spec = DgpSpec::default();
        let draw = draw_dgp(&spec, 40, 2).unwrap();
        let s0 = draw.observe(0).unwrap();
        let grid = GridSpec::Equispaced { size: 2001 }.draw(s0.y_lo(), s0.y_hi(), 0).unwrap();
        let (l, u) = oracle_adjuster(&spec, &s0, 500, &grid, 1).unwrap();
        assert!(l.values().windows(2).all(|w| w[0] == w[1]));
        assert!(u.values().windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn conditional_oracle_improves_on_no_covariates() {
        let spec = DgpSpec::default();
        let draw = draw_dgp(&spec, 20_000, 4).unwrap();
        let s10 = draw.observe(10).unwrap();
        let grid = GridSpec::RandomNormal { size: 2000 }.draw(s10.y_lo(), s10.y_hi(), 0).unwrap();
        let (l, u) = oracle_adjuster(&spec, &s10, 200, &grid, 1).unwrap();
        let oracle = bounds_with(&s10, &l, &u).unwrap();
        let plain = makarov_bounds(&s10).unwrap();
        assert!(oracle.theta_l > plain.theta_l + 0.05, "{} vs {}", oracle.theta_l, plain.theta_l);
        assert!(oracle.theta_u < plain.theta_u - 0.05, "{} vs {}", oracle.theta_u, plain.theta_u);
    }

    #[test]
    fn cells_parse_and_print() {
        let text = "n,p,model,estimator\n500,10,no_covariates,cross-fit\n# c\n2000, 20, oracle, sjls\n500,10,knn_loc_shift:k=5+constant,sample-split\n";
        let cells = parse_cells(text).unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[1], Cell::new(2000, 20, CellModel::Oracle, Estimator::Sjls));
        assert_eq!(cells[2].model.to_string(), "knn_loc_shift:k=5+constant");
        assert!(parse_cells("500,10,oracle,bogus").is_err());
        assert!(parse_cells("500,10,oracle").is_err());
        assert!(parse_cells("").is_err());
        assert_eq!(Cell::grid(&[500, 2000], &[10, 20], &[CellModel::Oracle], &[Estimator::CrossFit]).len(), 4);
    }

    #[test]
    fn small_table_is_deterministic() {
        let spec = DgpSpec::default();
        let cells = vec![
            Cell::new(200, 10, CellModel::NoCovariates, Estimator::CrossFit),
            Cell::new(200, 20, CellModel::NoCovariates, Estimator::CrossFit),
            Cell::new(200, 20, CellModel::Oracle, Estimator::SampleSplit),
            Cell::new(200, 20, CellModel::Oracle, Estimator::Sjls),
        ];
        let cfg = McConfig { reps: 10, theta0: Some(0.34), seed: 8, ..McConfig::default() };
        let a = run_table(&spec, &cells, &cfg).unwrap();
        let b = run_table(&spec, &cells, &cfg).unwrap();
        assert_eq!(a, b);
        // The no-covariates estimator ignores X, so p does not matter.
        assert_eq!(a.cells[0].mean_theta_l, a.cells[1].mean_theta_l);
        for c in &a.cells {
            assert_eq!(c.reps + c.failures, 10);
            assert!((c.reject_zero * 10.0 - (c.reject_zero * 10.0).round()).abs() < 1e-9);
            assert!((0.0..=1.0).contains(&c.avg_length));
        }
        assert!(!a.notes.is_empty());
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }
}
