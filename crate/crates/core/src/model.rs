//! Experiment data, fold planning, propensity specifications and outcome
//! transforms shared by every estimator.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal::norm_cdf;
use crate::rng;

/// Observations `(y, d, x)` from a two-arm experiment.
///
/// Control outcomes may carry a shift `delta` (see [`Sample::shift_for_delta`]);
/// the unshifted outcomes are kept so that shifts compose exactly.
#[derive(Clone, Debug)]
pub struct Sample {
    base_y: Arc<[f64]>,
    control_shift: f64,
    y: Vec<f64>,
    d: Vec<bool>,
    x: Vec<f64>,
    p: usize,
    n1: usize,
    n0: usize,
    y_lo: f64,
    y_hi: f64,
    transform: Option<OutcomeTransform>,
}

impl Sample {
    /// Builds a sample from per-unit rows. All covariate rows must have the
    /// same length.
    pub fn new(y: Vec<f64>, d: Vec<bool>, x_rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = x_rows.first().map_or(0, Vec::len);
        if x_rows.len() != y.len() {
            return Err(Error::config(format!(
                "{} covariate rows for {} outcomes",
                x_rows.len(),
                y.len()
            )));
        }
        let mut flat = Vec::with_capacity(y.len() * p);
        for (i, row) in x_rows.into_iter().enumerate() {
            if row.len() != p {
                return Err(Error::Parse {
                    row: i + 1,
                    msg: format!("expected {p} covariates, found {}", row.len()),
                });
            }
            flat.extend(row);
        }
        Self::from_flat(y, d, flat, p)
    }

    /// Builds a sample from a row-major covariate matrix with `p` columns.
    pub fn from_flat(y: Vec<f64>, d: Vec<bool>, x: Vec<f64>, p: usize) -> Result<Self> {
        let n = y.len();
        if d.len() != n {
            return Err(Error::config(format!("{} treatment flags for {n} outcomes", d.len())));
        }
        if x.len() != n * p {
            return Err(Error::config(format!(
                "covariate matrix has {} entries, expected {n} x {p}",
                x.len()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse { row: i + 1, msg: "outcome is not finite".into() });
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse { row: k / p.max(1) + 1, msg: "covariate is not finite".into() });
        }
        let base_y: Arc<[f64]> = y.into();
        Self::assemble(base_y, 0.0, d, x, p, None)
    }

    fn assemble(
        base_y: Arc<[f64]>,
        control_shift: f64,
        d: Vec<bool>,
        x: Vec<f64>,
        p: usize,
        transform: Option<OutcomeTransform>,
    ) -> Result<Self> {
        let n1 = d.iter().filter(|&&t| t).count();
        let n0 = d.len() - n1;
        if n1 == 0 || n0 == 0 {
            return Err(Error::degenerate(format!(
                "need at least one treated and one control unit (treated {n1}, control {n0})"
            )));
        }
        let y: Vec<f64> = if control_shift == 0.0 {
            base_y.to_vec()
        } else {
            base_y
                .iter()
                .zip(&d)
                .map(|(&v, &t)| if t { v } else { v + control_shift })
                .collect()
        };
        let (y_lo, y_hi) = y
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        Ok(Sample { base_y, control_shift, y, d, x, p, n1, n0, y_lo, y_hi, transform })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[bool] {
        &self.d
    }

    pub fn treated(&self, i: usize) -> bool {
        self.d[i]
    }

    /// Number of covariates.
    pub fn p(&self) -> usize {
        self.p
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn x_flat(&self) -> &[f64] {
        &self.x
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn y_lo(&self) -> f64 {
        self.y_lo
    }

    pub fn y_hi(&self) -> f64 {
        self.y_hi
    }

    /// Share of treated units, `n1 / n`.
    pub fn pi_hat(&self) -> f64 {
        self.n1 as f64 / self.len() as f64
    }

    /// Cumulative shift applied to control outcomes.
    pub fn delta(&self) -> f64 {
        self.control_shift
    }

    /// The bounded outcome transform applied to this sample, if any.
    pub fn transform(&self) -> Option<&OutcomeTransform> {
        self.transform.as_ref()
    }

    pub fn treated_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.d[i]).collect()
    }

    pub fn control_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.d[i]).collect()
    }

    /// Sub-sample with the given units, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<Sample> {
        let y: Vec<f64> = idx.iter().map(|&i| self.y[i]).collect();
        let d: Vec<bool> = idx.iter().map(|&i| self.d[i]).collect();
        let mut x = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
        }
        let mut out = Self::assemble(y.into(), 0.0, d, x, self.p, self.transform.clone())?;
        out.control_shift = self.control_shift;
        Ok(out)
    }

    /// Covariates and outcomes of the given units, regardless of arm.
    pub fn arm_data(&self, idx: &[usize]) -> ArmData {
        let mut x = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            x.extend_from_slice(self.x_row(i));
        }
        ArmData { x, p: self.p, y: idx.iter().map(|&i| self.y[i]).collect() }
    }

    /// Replaces control outcomes by `y + delta`, so that every bound computed
    /// downstream targets `P(Y(1) - Y(0) <= delta)`. Shifts compose; shifting
    /// by `delta` and then `-delta` restores the original outcomes exactly.
    pub fn shift_for_delta(&self, delta: f64) -> Result<Sample> {
        if !delta.is_finite() {
            return Err(Error::config("delta must be finite"));
        }
        let shift = self.control_shift + delta;
        // x + (-x) is exactly zero, so undoing a shift lands here.
        let shift = if shift.abs() <= f64::EPSILON * delta.abs().max(self.control_shift.abs()) {
            0.0
        } else {
            shift
        };
        Self::assemble(
            self.base_y.clone(),
            shift,
            self.d.clone(),
            self.x.clone(),
            self.p,
            self.transform.clone(),
        )
    }

    /// Maps outcomes through `Phi((y - median) / IQR)`, a bounded strictly
    /// increasing transform. At `delta = 0` the estimand is unchanged; the
    /// transformed scale is recorded so that reports can say so.
    pub fn squash_outcomes(&self) -> (Sample, OutcomeTransform) {
        let mut sorted = self.y.clone();
        sorted.sort_by(f64::total_cmp);
        let center = quantile_sorted(&sorted, 0.5);
        let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
        let range = self.y_hi - self.y_lo;
        let (scale, kind) = if iqr > 0.0 {
            (iqr, ScaleKind::Iqr)
        } else if range > 0.0 {
            (range, ScaleKind::Range)
        } else {
            (1.0, ScaleKind::Constant)
        };
        let transform = OutcomeTransform { center, scale, kind };
        let y: Vec<f64> = self.y.iter().map(|&v| transform.apply(v)).collect();
        let sample = Self::assemble(
            y.into(),
            0.0,
            self.d.clone(),
            self.x.clone(),
            self.p,
            Some(transform.clone()),
        )
        .expect("arms unchanged by transform");
        (sample, transform)
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// How the squashing transform standardized outcomes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    Iqr,
    /// Interquartile range was zero; the full range was used instead.
    Range,
    /// All outcomes are equal.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeTransform {
    pub center: f64,
    pub scale: f64,
    pub kind: ScaleKind,
}

impl OutcomeTransform {
    pub fn apply(&self, y: f64) -> f64 {
        norm_cdf((y - self.center) / self.scale)
    }

    pub fn warning(&self) -> Option<String> {
        match self.kind {
            ScaleKind::Iqr => None,
            ScaleKind::Range => {
                Some("outcome interquartile range is zero; standardized by the full range".into())
            }
            ScaleKind::Constant => {
                Some("outcome is constant; the bounded transform is affine on this sample".into())
            }
        }
    }
}

/// Covariates and outcomes for a set of units, used to train per-arm models.
#[derive(Clone, Debug)]
pub struct ArmData {
    pub x: Vec<f64>,
    pub p: usize,
    pub y: Vec<f64>,
}

impl ArmData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
}

/// Assignment of every unit to one of `k` folds, stratified by treatment arm.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    fold_of: Vec<usize>,
}

impl FoldPlan {
    /// Wraps an explicit assignment. Fold indices are zero-based.
    pub fn from_assignment(k: usize, fold_of: Vec<usize>) -> Result<Self> {
        if k < 2 {
            return Err(Error::config("k_folds must be at least 2"));
        }
        if let Some(i) = fold_of.iter().position(|&f| f >= k) {
            return Err(Error::config(format!("unit {i} assigned to fold outside 0..{k}")));
        }
        Ok(FoldPlan { k, fold_of })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Zero-based fold index of every unit.
    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    pub fn in_fold(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn out_of_fold(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }
}

/// Random stratified `k`-fold plan. Within each arm fold sizes differ by at
/// most one; remainder units go one per fold in a shuffled fold order.
pub fn make_folds(sample: &Sample, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config("k_folds must be at least 2"));
    }
    if k > sample.n1().min(sample.n0()) {
        return Err(Error::config(format!(
            "k_folds = {k} exceeds the smaller arm size {}",
            sample.n1().min(sample.n0())
        )));
    }
    let strata: Vec<usize> = sample.d().iter().map(|&t| usize::from(t)).collect();
    Ok(stratified_folds(&strata, k, seed))
}

/// Fold plan balanced within every stratum label.
pub fn stratified_folds(strata: &[usize], k: usize, seed: u64) -> FoldPlan {
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in strata.iter().enumerate() {
        members.entry(s).or_default().push(i);
    }
    let mut fold_of = vec![0; strata.len()];
    for (label, mut units) in members {
        let mut rng = rng::stream(seed, &[0xF01D, label as u64]);
        units.shuffle(&mut rng);
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut rng);
        for (pos, &i) in units.iter().enumerate() {
            fold_of[i] = order[pos % k];
        }
    }
    FoldPlan { k, fold_of }
}

/// How treatment probabilities are known or estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Propensity {
    /// Arm shares estimated in-sample (`n1 / n`).
    InSample,
    /// A known constant probability of treatment.
    ConstantKnown { pi: f64 },
    /// Probability constant within groups; one zero-based group label per unit.
    Group { group_of: Vec<usize> },
    /// Known per-unit probabilities `p(X_i)`.
    KnownFunction { p_of_x: Vec<f64> },
}

/// Default floor keeping known propensities away from 0 and 1.
pub const PROPENSITY_FLOOR: f64 = 1e-3;

impl Propensity {
    pub fn validate(&self, sample: &Sample, eps: f64) -> Result<()> {
        let check = |i: usize, p: f64| -> Result<()> {
            if !(p.is_finite() && p >= eps && p <= 1.0 - eps) {
                return Err(Error::Parse {
                    row: i + 1,
                    msg: format!("propensity {p} outside [{eps}, {}]", 1.0 - eps),
                });
            }
            Ok(())
        };
        match self {
            Propensity::InSample => Ok(()),
            Propensity::ConstantKnown { pi } => check(0, *pi).map_err(|_| {
                Error::config(format!("propensity pi = {pi} outside [{eps}, {}]", 1.0 - eps))
            }),
            Propensity::KnownFunction { p_of_x } => {
                if p_of_x.len() != sample.len() {
                    return Err(Error::config(format!(
                        "{} propensity values for {} units",
                        p_of_x.len(),
                        sample.len()
                    )));
                }
                p_of_x.iter().enumerate().try_for_each(|(i, &p)| check(i, p))
            }
            Propensity::Group { group_of } => {
                if group_of.len() != sample.len() {
                    return Err(Error::config(format!(
                        "{} group labels for {} units",
                        group_of.len(),
                        sample.len()
                    )));
                }
                let groups = group_of.iter().max().map_or(0, |g| g + 1);
                let mut cells = vec![[0usize; 2]; groups];
                for (i, &g) in group_of.iter().enumerate() {
                    cells[g][usize::from(sample.treated(i))] += 1;
                }
                for (g, c) in cells.iter().enumerate() {
                    if c[0] + c[1] > 0 && (c[0] == 0 || c[1] == 0) {
                        return Err(Error::degenerate(format!(
                            "group {g} has {} treated and {} control units",
                            c[1], c[0]
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Per-unit treatment probabilities, when they are known.
    pub fn unit_probabilities(&self, sample: &Sample) -> Option<Vec<f64>> {
        match self {
            Propensity::ConstantKnown { pi } => Some(vec![*pi; sample.len()]),
            Propensity::KnownFunction { p_of_x } => Some(p_of_x.clone()),
            _ => None,
        }
    }
}

/// Where an adjuster's values came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjusterLabel {
    Zero,
    FittedL,
    FittedU,
    Oracle,
    User,
}

/// Per-unit evaluations `s(X_i)` of a covariate-adjustment function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adjuster {
    values: Vec<f64>,
    label: AdjusterLabel,
}

impl Adjuster {
    pub fn new(values: Vec<f64>, label: AdjusterLabel) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse { row: i + 1, msg: "adjuster value is not finite".into() });
        }
        Ok(Adjuster { values, label })
    }

    pub fn zero(n: usize) -> Self {
        Adjuster { values: vec![0.0; n], label: AdjusterLabel::Zero }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn label(&self) -> AdjusterLabel {
        self.label
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn check_len(&self, sample: &Sample) -> Result<()> {
        if self.values.len() != sample.len() {
            return Err(Error::config(format!(
                "adjuster has {} values for {} units",
                self.values.len(),
                sample.len()
            )));
        }
        Ok(())
    }
}

/// Column mapping for CSV input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub y: String,
    pub d: String,
    /// Every column whose name starts with this prefix is a covariate, in
    /// header order.
    pub x_prefix: String,
    /// Additional numeric columns to read alongside the sample.
    #[serde(default)]
    pub extra: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { y: "y".into(), d: "d".into(), x_prefix: "x".into(), extra: Vec::new() }
    }
}

/// A sample plus any extra columns requested by the schema.
#[derive(Clone, Debug)]
pub struct Table {
    pub sample: Sample,
    pub extra: BTreeMap<String, Vec<f64>>,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Sample> {
    Ok(load_table(path, schema)?.sample)
}

pub fn load_table(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Table> {
    read_table(File::open(path)?, schema)
}

/// Reads a headered CSV. Rows keep their file order; row numbers in errors
/// count the header as row 1.
pub fn read_table<R: Read>(reader: R, schema: &CsvSchema) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config(format!("column '{name}' not found in header")))
    };
    let y_col = find(&schema.y)?;
    let d_col = find(&schema.d)?;
    let extra_cols: Vec<usize> = schema.extra.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let x_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(j, h)| {
            !schema.x_prefix.is_empty()
                && h.starts_with(&schema.x_prefix)
                && *j != y_col
                && *j != d_col
                && !extra_cols.contains(j)
        })
        .map(|(j, _)| j)
        .collect();

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut x = Vec::new();
    let mut extra = vec![Vec::new(); extra_cols.len()];
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Parse { row, msg: e.to_string() })?;
        let field = |j: usize, name: &str| -> Result<f64> {
            let raw = rec.get(j).unwrap_or("");
            if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
                return Err(Error::Parse { row, msg: format!("missing value in column '{name}'") });
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::Parse { row, msg: format!("cannot parse '{raw}' in column '{name}'") })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, msg: format!("non-finite value in column '{name}'") });
            }
            Ok(v)
        };
        y.push(field(y_col, &schema.y)?);
        let dv = field(d_col, &schema.d)?;
        if dv != 0.0 && dv != 1.0 {
            return Err(Error::Parse {
                row,
                msg: format!("treatment column '{}' must be 0 or 1, found {dv}", schema.d),
            });
        }
        d.push(dv == 1.0);
        for &j in &x_cols {
            x.push(field(j, &headers[j])?);
        }
        for (slot, &j) in extra.iter_mut().zip(&extra_cols) {
            slot.push(field(j, &headers[j])?);
        }
    }
    let sample = Sample::from_flat(y, d, x, x_cols.len())?;
    Ok(Table { sample, extra: schema.extra.iter().cloned().zip(extra).collect() })
}

/// Writes the sample as CSV with columns `y, d, x1..xp` named by `schema`.
/// Values use the shortest representation that parses back to the same bits.
pub fn write_csv<W: Write>(sample: &Sample, schema: &CsvSchema, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![schema.y.clone(), schema.d.clone()];
    header.extend((1..=sample.p()).map(|j| format!("{}{j}", schema.x_prefix)));
    w.write_record(&header)?;
    for i in 0..sample.len() {
        let mut rec = vec![sample.y()[i].to_string(), u8::from(sample.treated(i)).to_string()];
        rec.extend(sample.x_row(i).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Maps arbitrary numeric labels to zero-based group indices in ascending
/// label order.
pub fn group_labels(raw: &[f64]) -> Vec<usize> {
    let mut distinct: Vec<f64> = raw.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    raw.iter()
        .map(|v| distinct.partition_point(|d| d < v))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(y: Vec<f64>, d: Vec<bool>) -> Sample {
        let n = y.len();
        Sample::new(y, d, vec![vec![]; n]).unwrap()
    }

    #[test]
    fn four_row_file_counts_arms() {
        let csv = "y,d,x1\n1.0,1,0.5\n2.0,1,0.1\n3.0,0,0.2\n4.0,0,0.3\n";
        let s = read_table(csv.as_bytes(), &CsvSchema::default()).unwrap().sample;
        assert_eq!((s.n1(), s.n0(), s.p()), (2, 2, 1));
        assert_eq!(s.y(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!((s.y_lo(), s.y_hi()), (1.0, 4.0));
    }

    #[test]
    fn bad_treatment_value_names_row() {
        let csv = "y,d\n1.0,1\n2.0,2\n3.0,0\n";
        let err = read_table(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        match err {
            Error::Parse { row, msg } => {
                assert_eq!(row, 3);
                assert!(msg.contains("0 or 1"), "{msg}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_values_are_rejected() {
        let csv = "y,d,x1\n1.0,1,\n2.0,0,0.1\n";
        assert!(matches!(
            read_table(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn single_arm_file_is_degenerate() {
        let csv = "y,d\n1.0,1\n2.0,1\n";
        assert!(matches!(
            read_table(csv.as_bytes(), &CsvSchema::default()),
            Err(Error::DegenerateDesign(_))
        ));
    }

    #[test]
    fn bosnia_shaped_file_counts() {
        let mut csv = String::from("income,treat,cov_a,cov_b\n");
        for i in 0..995 {
            let t = usize::from(i < 551);
            csv.push_str(&format!("{}.25,{t},{},{}\n", i % 17, i % 3, i % 5));
        }
        let schema = CsvSchema {
            y: "income".into(),
            d: "treat".into(),
            x_prefix: "cov_".into(),
            extra: vec![],
        };
        let s = read_table(csv.as_bytes(), &schema).unwrap().sample;
        assert_eq!((s.n1(), s.n0(), s.p()), (551, 444, 2));
    }

    #[test]
    fn extra_columns_are_read() {
        let csv = "y,d,x1,g\n1,1,0,3\n2,0,1,5\n";
        let schema = CsvSchema { extra: vec!["g".into()], ..CsvSchema::default() };
        let t = read_table(csv.as_bytes(), &schema).unwrap();
        assert_eq!(t.sample.p(), 1);
        assert_eq!(t.extra["g"], vec![3.0, 5.0]);
        assert_eq!(group_labels(&t.extra["g"]), vec![0, 1]);
    }

    #[test]
    fn zero_shift_is_identity() {
        let s = toy(vec![1.0, 2.0, 3.0], vec![true, false, false]);
        assert_eq!(s.shift_for_delta(0.0).unwrap().y(), s.y());
    }

    #[test]
    fn shift_moves_only_controls() {
        let s = toy(vec![1.0, 1.0], vec![true, false]);
        let t = s.shift_for_delta(0.05).unwrap();
        assert_eq!(t.y(), &[1.0, 1.05]);
        assert_eq!(t.delta(), 0.05);
    }

    #[test]
    fn constant_outcome_squash_warns() {
        let s = toy(vec![2.0; 4], vec![true, false, true, false]);
        let (t, tr) = s.squash_outcomes();
        assert_eq!(tr.kind, ScaleKind::Constant);
        assert!(tr.warning().is_some());
        assert!(t.y().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn zero_iqr_falls_back_to_range() {
        let s = toy(vec![0.0, 1.0, 1.0, 1.0, 1.0, 9.0], vec![true, false, true, false, true, false]);
        let (_, tr) = s.squash_outcomes();
        assert_eq!(tr.kind, ScaleKind::Range);
        assert_eq!(tr.scale, 9.0);
    }

    #[test]
    fn fold_sizes_exact_division() {
        let d: Vec<bool> = (0..20).map(|i| i < 10).collect();
        let s = toy(vec![0.0; 20], d);
        let plan = make_folds(&s, 5, 3).unwrap();
        for f in 0..5 {
            let members = plan.in_fold(f);
            let treated = members.iter().filter(|&&i| s.treated(i)).count();
            assert_eq!((treated, members.len() - treated), (2, 2));
        }
    }

    #[test]
    fn fold_sizes_with_remainder() {
        let d: Vec<bool> = (0..21).map(|i| i < 11).collect();
        let s = toy(vec![0.0; 21], d);
        let plan = make_folds(&s, 5, 9).unwrap();
        let mut sizes: Vec<usize> =
            (0..5).map(|f| plan.in_fold(f).iter().filter(|&&i| s.treated(i)).count()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn folds_are_deterministic_and_validated() {
        let d: Vec<bool> = (0..12).map(|i| i % 2 == 0).collect();
        let s = toy(vec![0.0; 12], d);
        assert_eq!(make_folds(&s, 3, 11).unwrap(), make_folds(&s, 3, 11).unwrap());
        assert!(matches!(make_folds(&s, 7, 1), Err(Error::Config(_))));
        assert!(matches!(make_folds(&s, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn propensity_floor_is_an_error() {
        let s = toy(vec![0.0; 2], vec![true, false]);
        let bad = Propensity::KnownFunction { p_of_x: vec![0.5, 0.0005] };
        assert!(matches!(bad.validate(&s, PROPENSITY_FLOOR), Err(Error::Parse { row: 2, .. })));
        let ok = Propensity::KnownFunction { p_of_x: vec![0.5, 0.3] };
        assert!(ok.validate(&s, PROPENSITY_FLOOR).is_ok());
        let groups = Propensity::Group { group_of: vec![0, 1] };
        assert!(matches!(groups.validate(&s, PROPENSITY_FLOOR), Err(Error::DegenerateDesign(_))));
    }

    proptest! {
        #[test]
        fn shift_and_unshift_restore_outcomes(
            ys in prop::collection::vec(-1e6f64..1e6, 2..40),
            delta in -1e3f64..1e3,
        ) {
            let n = ys.len();
            let d: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let s = toy(ys, d);
            let back = s.shift_for_delta(delta).unwrap().shift_for_delta(-delta).unwrap();
            prop_assert_eq!(back.y(), s.y());
        }

        #[test]
        fn fold_stratification_holds(n1 in 3usize..60, n0 in 3usize..60, k in 2usize..4, seed in any::<u64>()) {
            let d: Vec<bool> = (0..n1 + n0).map(|i| i < n1).collect();
            let s = toy(vec![0.0; n1 + n0], d);
            let plan = make_folds(&s, k, seed).unwrap();
            for f in 0..k {
                let members = plan.in_fold(f);
                let t = members.iter().filter(|&&i| s.treated(i)).count() as f64;
                let c = members.len() as f64 - t;
                prop_assert!((t - n1 as f64 / k as f64).abs() < 1.0);
                prop_assert!((c - n0 as f64 / k as f64).abs() < 1.0);
            }
        }

        #[test]
        fn csv_round_trip_is_bit_exact(
            rows in prop::collection::vec((-1e9f64..1e9, any::<bool>(), -1e3f64..1e3), 2..30)
        ) {
            let mut rows = rows;
            rows[0].1 = true;
            rows[1].1 = false;
            let s = Sample::new(
                rows.iter().map(|r| r.0).collect(),
                rows.iter().map(|r| r.1).collect(),
                rows.iter().map(|r| vec![r.2, r.2 * 0.5]).collect(),
            ).unwrap();
            let mut buf = Vec::new();
            write_csv(&s, &CsvSchema::default(), &mut buf).unwrap();
            let back = read_table(buf.as_slice(), &CsvSchema::default()).unwrap().sample;
            prop_assert_eq!(back.y(), s.y());
            prop_assert_eq!(back.d(), s.d());
            prop_assert_eq!(back.x_flat(), s.x_flat());
        }

        #[test]
        fn squash_preserves_order(ys in prop::collection::vec(-50f64..50.0, 4..40)) {
            let n = ys.len();
            let d: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
            let s = toy(ys.clone(), d);
            let (t, _) = s.squash_outcomes();
            for i in 0..n {
                for j in 0..n {
                    if ys[i] < ys[j] {
                        prop_assert!(t.y()[i] <= t.y()[j]);
                    }
                }
            }
        }
    }
}
