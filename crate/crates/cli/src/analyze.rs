//! The analyze and bounds-curve pipelines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dtebounds::cross_fit::{
    fit_adjusters_on, fit_fold_adjusters, one_sided_cis, sjls_estimate, stoye_ci, variant_fold_t,
    variant_group_propensity, variant_known_propensity, BoundsEstimate, FoldInfo, HRule, OneSided,
};
use dtebounds::ecdf::{inf_delta, sup_delta, DeltaCurve, WeightMode};
use dtebounds::model::{group_labels, load_table, CsvSchema, Propensity, Sample, PROPENSITY_FLOOR};
use dtebounds::{estimate_crossfit, estimate_split, make_folds, rng, AdjusterPlan, Learner, SplitPlan};
use serde_json::{json, Value};

use crate::config::{parse_grid, Method, PropensityMode, RunConfig};
use crate::CliError;

/// Per-purpose seeds derived from the master seed.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub master: u64,
    pub split: u64,
    pub folds: u64,
    pub fit: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds {
            master,
            split: rng::derive_seed(master, &[1]),
            folds: rng::derive_seed(master, &[2]),
            fit: rng::derive_seed(master, &[3]),
        }
    }

    fn json(&self) -> Value {
        json!({ "master": self.master, "split": self.split, "folds": self.folds, "fit": self.fit })
    }
}

struct Data {
    sample: Sample,
    extra: BTreeMap<String, Vec<f64>>,
    notes: Vec<String>,
}

fn load(cfg: &RunConfig) -> Result<Data, CliError> {
    let input = cfg.input.as_ref().ok_or_else(|| CliError::config("input", "no input file given"))?;
    let mut extra: Vec<String> = Vec::new();
    if matches!(cfg.propensity.mode, PropensityMode::Group | PropensityMode::KnownFunction) {
        extra.extend(cfg.propensity.column.clone());
    }
    extra.extend(cfg.adjuster_lower.clone());
    extra.extend(cfg.adjuster_upper.clone());
    extra.dedup();
    let schema = CsvSchema { y: cfg.y.clone(), d: cfg.d.clone(), x_prefix: cfg.x_prefix.clone(), extra };
    let table = load_table(input, &schema).map_err(|e| CliError::core(format!("{}", input.display()), e))?;
    let mut notes = Vec::new();
    let mut sample = table.sample;
    if cfg.delta != 0.0 {
        sample = sample.shift_for_delta(cfg.delta)?;
    }
    if cfg.squash {
        let (squashed, transform) = sample.squash_outcomes();
        notes.extend(transform.warning());
        sample = squashed;
    }
    Ok(Data { sample, extra: table.extra, notes })
}

fn adjuster_plan(cfg: &RunConfig, data: &Data) -> Result<AdjusterPlan, CliError> {
    if let (Some(l), Some(u)) = (&cfg.adjuster_lower, &cfg.adjuster_upper) {
        return Ok(AdjusterPlan::Fixed { lower: data.extra[l].clone(), upper: data.extra[u].clone() });
    }
    let mut learner = Learner::new(&cfg.model_specs()?);
    learner.grid = parse_grid(&cfg.grid)?;
    learner.cv_folds = cfg.cv_folds;
    Ok(AdjusterPlan::Learned(learner))
}

/// Per-unit treatment probabilities for the weighted estimators.
fn unit_probabilities(cfg: &RunConfig, data: &Data) -> Result<Vec<f64>, CliError> {
    let s = &data.sample;
    let column = || data.extra[cfg.propensity.column.as_ref().expect("validated")].clone();
    let p = match cfg.propensity.mode {
        PropensityMode::InSample => vec![s.pi_hat(); s.len()],
        PropensityMode::ConstantKnown => vec![cfg.propensity.pi.expect("validated"); s.len()],
        PropensityMode::KnownFunction => column(),
        PropensityMode::Group => {
            let g = group_labels(&column());
            Propensity::Group { group_of: g.clone() }.validate(s, PROPENSITY_FLOOR)?;
            let k = g.iter().max().map_or(0, |m| m + 1);
            let mut cells = vec![(0usize, 0usize); k];
            for (i, &gi) in g.iter().enumerate() {
                cells[gi].0 += usize::from(s.treated(i));
                cells[gi].1 += 1;
            }
            g.iter().map(|&gi| cells[gi].0 as f64 / cells[gi].1 as f64).collect()
        }
    };
    Propensity::KnownFunction { p_of_x: p.clone() }.validate(s, PROPENSITY_FLOOR)?;
    Ok(p)
}

enum Weights {
    ArmShare,
    Ipw(Vec<f64>),
    Group(Vec<usize>),
}

impl Weights {
    fn mode(&self) -> WeightMode<'_> {
        match self {
            Weights::ArmShare => WeightMode::ArmShare,
            Weights::Ipw(p) => WeightMode::Ipw { p, normalize: false },
            Weights::Group(g) => WeightMode::Group { group_of: g },
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Weights::ArmShare => "arm_share",
            Weights::Ipw(_) => "ipw_unnormalized",
            Weights::Group(_) => "group",
        }
    }
}

/// Adjusted values and weighting behind the reported bounds, for curve dumps.
struct CurveInputs {
    z_l: Vec<f64>,
    z_u: Vec<f64>,
    d: Vec<bool>,
    weights: Weights,
    /// Why the curve extremum may differ from the reported bound.
    note: Option<&'static str>,
}

impl CurveInputs {
    fn pooled(sample: &Sample, s_l: &[f64], s_u: &[f64], weights: Weights) -> Self {
        let z = |s: &[f64]| sample.y().iter().zip(s).map(|(y, s)| y - s).collect();
        CurveInputs { z_l: z(s_l), z_u: z(s_u), d: sample.d().to_vec(), weights, note: None }
    }
}

/// Everything an analysis produces.
pub struct Analysis {
    pub report: Value,
    pub text: String,
    curves: CurveInputs,
}

fn opt_json(t: Option<f64>) -> Value {
    t.map_or(Value::String("-inf".into()), |t| json!(t))
}

fn estimate_json(e: &BoundsEstimate) -> Value {
    json!({
        "theta_l": e.theta_l,
        "theta_u": e.theta_u,
        "raw_l": e.raw_l,
        "raw_u": e.raw_u,
        "t_l": opt_json(e.t_l),
        "t_u": opt_json(e.t_u),
        "sigma2_l": e.sigma2_l,
        "sigma2_u": e.sigma2_u,
        "sigma_lu": e.sigma_lu,
        "pi_hat": e.pi_hat,
    })
}

struct Asymptotic {
    one_sided: OneSided,
    stoye: Vec<(bool, Value)>,
}

fn asymptotic(cfg: &RunConfig, e: &BoundsEstimate, n: usize, diagnostics: &mut Vec<String>) -> Result<Asymptotic, CliError> {
    let one_sided = one_sided_cis(e, cfg.alpha, n)?;
    let mut stoye = Vec::new();
    if cfg.alpha < 0.5 {
        let primary = cfg.h_rule.rule(cfg.q);
        for rule in HRule::all(cfg.q) {
            let s = stoye_ci(e, cfg.alpha, n, rule)?;
            stoye.push((
                rule == primary,
                json!({
                    "rule": s.rule,
                    "primary": rule == primary,
                    "h_n": s.h_n,
                    "c_l": s.c_l,
                    "c_u": s.c_u,
                    "lambda": s.lambda,
                    "lo": s.lo,
                    "hi": s.hi,
                    "empty": s.empty,
                    "clipped": s.clipped().map(|(a, b)| json!([a, b])),
                }),
            ));
        }
    } else {
        diagnostics.push(format!("alpha = {} is at least 0.5; two-sided intervals are not reported", cfg.alpha));
    }
    if one_sided.degenerate {
        diagnostics.push("a standard error is zero; p-values use the degenerate convention".into());
    }
    Ok(Asymptotic { one_sided, stoye })
}

/// Smallest alpha at which the DKW interval excludes the boundary value,
/// given the distance `gap` from it and `k = 1/sqrt(n1) + 1/sqrt(n0)`.
fn dkw_p_value(gap: f64, n1: usize, n0: usize) -> f64 {
    if gap <= 0.0 {
        return 1.0;
    }
    let k = 1.0 / (n1 as f64).sqrt() + 1.0 / (n0 as f64).sqrt();
    (2.0 * (-2.0 * (gap / k).powi(2)).exp()).min(1.0)
}

pub fn run(cfg: &RunConfig) -> Result<Analysis, CliError> {
    cfg.validate()?;
    let data = load(cfg)?;
    let plan = adjuster_plan(cfg, &data)?;
    let seeds = Seeds::new(cfg.seed);
    let s = &data.sample;
    let n = s.len();
    let mut diagnostics = data.notes.clone();
    let mut folds_info: Vec<FoldInfo> = Vec::new();
    let mut body = serde_json::Map::new();

    let (estimate, asym, curves) = match cfg.method {
        Method::SampleSplit => {
            let split = SplitPlan::random(s, cfg.aux_fraction, seeds.split)?;
            let est = estimate_split(s, &split, &plan, cfg.alpha, seeds.fit)?;
            let fit = fit_adjusters_on(s, &split.aux, &split.main, &plan, seeds.fit)?;
            diagnostics.extend(est.warnings.iter().cloned());
            if est.crossed {
                diagnostics.push("the one-sided finite-sample intervals cross".into());
            }
            let sub = s.subset(&split.main)?;
            let curves = CurveInputs::pooled(&sub, &fit.lower, &fit.upper, Weights::ArmShare);
            body.insert(
                "finite_sample".into(),
                json!({
                    "c_alpha": est.c_alpha,
                    "c_alpha_half": est.c_alpha_half,
                    "n1_main": est.n1_main,
                    "n0_main": est.n0_main,
                    "n_aux": split.aux.len(),
                    "aux_fraction": est.aux_fraction,
                    "lower_ci": [est.lower_ci.0, est.lower_ci.1],
                    "upper_ci": [est.upper_ci.0, est.upper_ci.1],
                    "two_sided": est.two_sided.map(|(a, b)| json!([a, b])),
                    "crossed": est.crossed,
                    "p_lower": dkw_p_value(est.theta_l, est.n1_main, est.n0_main),
                    "p_upper": dkw_p_value(1.0 - est.theta_u, est.n1_main, est.n0_main),
                    "model_l": est.model_l,
                    "model_u": est.model_u,
                }),
            );
            let e = json!({
                "theta_l": est.theta_l,
                "theta_u": est.theta_u,
                "t_l": opt_json(est.t_l),
                "t_u": opt_json(est.t_u),
            });
            (e, None, curves)
        }
        Method::CrossFit => {
            let folds = make_folds(s, cfg.k_folds, seeds.folds)?;
            let cf = estimate_crossfit(s, &folds, &plan, seeds.fit)?;
            diagnostics.extend(cf.diagnostics.iter().cloned());
            folds_info = cf.adjusters.folds.clone();
            let curves = CurveInputs::pooled(s, &cf.adjusters.lower, &cf.adjusters.upper, Weights::ArmShare);
            let a = asymptotic(cfg, &cf.estimate, n, &mut diagnostics)?;
            (estimate_json(&cf.estimate), Some(a), curves)
        }
        Method::Sjls => {
            let folds = make_folds(s, cfg.k_folds, seeds.folds)?;
            let adj = fit_fold_adjusters(s, &folds, &plan, seeds.fit)?;
            folds_info = adj.folds.clone();
            let p = unit_probabilities(cfg, &data)?;
            let sj = sjls_estimate(s, &adj.lower, &adj.upper, &p)?;
            let mut e = estimate_json(&sj.estimate);
            e["theta_c_l"] = json!(sj.theta_c_l);
            e["theta_c_u"] = json!(sj.theta_c_u);
            let mut curves = CurveInputs::pooled(s, &adj.lower, &adj.upper, Weights::Ipw(p));
            curves.note = Some("the estimate is the curve value at t = 0, not its extremum");
            let a = asymptotic(cfg, &sj.estimate, n, &mut diagnostics)?;
            (e, Some(a), curves)
        }
        Method::CrossFitGroup => {
            let column = cfg.propensity.column.as_ref().expect("validated");
            let g = group_labels(&data.extra[column]);
            let (est, adj) = variant_group_propensity(s, &g, cfg.k_folds, &plan, seeds.folds)?;
            folds_info = adj.folds.clone();
            let curves = CurveInputs::pooled(s, &adj.lower, &adj.upper, Weights::Group(g));
            let a = asymptotic(cfg, &est, n, &mut diagnostics)?;
            (estimate_json(&est), Some(a), curves)
        }
        Method::CrossFitIpw => {
            let p = unit_probabilities(cfg, &data)?;
            let folds = make_folds(s, cfg.k_folds, seeds.folds)?;
            let (est, adj) = variant_known_propensity(s, &folds, &plan, &p, seeds.fit)?;
            folds_info = adj.folds.clone();
            let curves = CurveInputs::pooled(s, &adj.lower, &adj.upper, Weights::Ipw(p));
            let a = asymptotic(cfg, &est, n, &mut diagnostics)?;
            (estimate_json(&est), Some(a), curves)
        }
        Method::CrossFitFoldt => {
            let folds = make_folds(s, cfg.k_folds, seeds.folds)?;
            let est = variant_fold_t(s, &folds, &plan, seeds.fit)?;
            let adj = fit_fold_adjusters(s, &folds, &plan, seeds.fit)?;
            folds_info = adj.folds.clone();
            let mut curves = CurveInputs::pooled(s, &adj.lower, &adj.upper, Weights::ArmShare);
            curves.note = Some("the estimate evaluates each fold at its own out-of-fold optimizer");
            let a = asymptotic(cfg, &est, n, &mut diagnostics)?;
            (estimate_json(&est), Some(a), curves)
        }
    };
    for f in &folds_info {
        diagnostics.extend(f.warnings.iter().map(|w| format!("fold {}: {w}", f.fold)));
    }
    diagnostics.dedup();

    let mut report = serde_json::Map::new();
    report.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
    report.insert("command".into(), json!("analyze"));
    report.insert("method".into(), json!(cfg.method.to_string()));
    report.insert(
        "data".into(),
        json!({
            "n": n,
            "n1": s.n1(),
            "n0": s.n0(),
            "p": s.p(),
            "delta": cfg.delta,
            "outcome_transform": s.transform(),
        }),
    );
    report.insert("estimate".into(), estimate.clone());
    if let Some(a) = &asym {
        let o = &a.one_sided;
        report.insert(
            "one_sided".into(),
            json!({
                "alpha": o.alpha,
                "z": o.z,
                "lower_ci": [o.lower_ci.0, o.lower_ci.1],
                "upper_ci": [o.upper_ci.0, o.upper_ci.1],
                "p_lower": o.p_lower,
                "p_upper": o.p_upper,
                "degenerate": o.degenerate,
            }),
        );
        report.insert("stoye".into(), Value::Array(a.stoye.iter().map(|(_, v)| v.clone()).collect()));
    }
    report.extend(body);
    report.insert("folds".into(), serde_json::to_value(&folds_info).expect("fold info serializes"));
    report.insert("diagnostics".into(), json!(diagnostics));
    report.insert("seeds".into(), seeds.json());
    report.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
    let report = Value::Object(report);
    let text = render_text(cfg, &report);
    Ok(Analysis { report, text, curves })
}

fn num(v: &Value) -> String {
    match v {
        Value::Number(x) => format!("{:.4}", x.as_f64().unwrap_or(f64::NAN)),
        Value::String(s) => s.clone(),
        Value::Null => "-".into(),
        other => other.to_string(),
    }
}

fn interval(v: &Value) -> String {
    match v.as_array() {
        Some(a) if a.len() == 2 => format!("[{}, {}]", num(&a[0]), num(&a[1])),
        _ => "empty".into(),
    }
}

fn render_text(cfg: &RunConfig, r: &Value) -> String {
    let mut out = String::new();
    let d = &r["data"];
    let e = &r["estimate"];
    let pct = format!("{}%", (100.0 * (1.0 - cfg.alpha)).round());
    let _ = writeln!(out, "method      {}", cfg.method);
    let _ = writeln!(out, "delta       {}", cfg.delta);
    let _ = writeln!(out, "units       {} ({} treated, {} control, {} covariates)", d["n"], d["n1"], d["n0"], d["p"]);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<14}{:>10}{:>12}  {:<20}{:>10}", "", "estimate", "optimizer", format!("one-sided {pct}"), "p-value");
    let rows: [(&str, &str, &str, &str, &str); 2] =
        [("lower bound", "theta_l", "t_l", "lower_ci", "p_lower"), ("upper bound", "theta_u", "t_u", "upper_ci", "p_upper")];
    let ci = r.get("one_sided").or_else(|| r.get("finite_sample"));
    for (name, est, t, iv, p) in rows {
        let (iv, p) = ci.map_or(("-".into(), "-".into()), |c| (interval(&c[iv]), num(&c[p])));
        let _ = writeln!(out, "{name:<14}{:>10}{:>12}  {iv:<20}{p:>10}", num(&e[est]), num(&e[t]));
    }
    if let Some(fs) = r.get("finite_sample") {
        let _ = writeln!(
            out,
            "\nDKW c_alpha {} (main arms {} treated, {} control; aux fraction {})",
            num(&fs["c_alpha"]),
            fs["n1_main"],
            fs["n0_main"],
            fs["aux_fraction"]
        );
        let _ = writeln!(out, "two-sided {pct} {}", interval(&fs["two_sided"]));
    }
    if let Some(Value::Array(st)) = r.get("stoye") {
        let _ = writeln!(out, "\ntwo-sided {pct} intervals for theta");
        for s in st {
            let mark = if s["primary"] == json!(true) { "*" } else { " " };
            let _ = writeln!(out, "{mark} {:<18}{}", s["rule"].as_str().unwrap_or(""), interval(&s["clipped"]));
        }
    }
    if let Some(Value::Array(diag)) = r.get("diagnostics") {
        if !diag.is_empty() {
            let _ = writeln!(out, "\ndiagnostics");
            for m in diag {
                let _ = writeln!(out, "  - {}", m.as_str().unwrap_or(""));
            }
        }
    }
    out
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

/// Writes `<output>.json` and `<output>.txt`; returns the text table.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<String, CliError> {
    let a = run(cfg)?;
    write(&with_suffix(&cfg.output, ".json"), &pretty(&a.report))?;
    write(&with_suffix(&cfg.output, ".txt"), a.text.as_bytes())?;
    Ok(a.text)
}

/// Writes `<output>.lower.tsv`, `<output>.upper.tsv` and `<output>.curve.json`.
pub fn cmd_bounds_curve(cfg: &RunConfig) -> Result<String, CliError> {
    let a = run(cfg)?;
    let c = &a.curves;
    let lower = DeltaCurve::from_adjusted(&c.z_l, &c.d, c.weights.mode())?;
    let upper = DeltaCurve::from_adjusted(&c.z_u, &c.d, c.weights.mode())?;
    let (lo, hi) = (sup_delta(&lower), inf_delta(&upper));
    let mut buf_l = Vec::new();
    let mut buf_u = Vec::new();
    lower.dump(&mut buf_l).map_err(|e| CliError::Io(e.to_string()))?;
    upper.dump(&mut buf_u).map_err(|e| CliError::Io(e.to_string()))?;
    let lower_path = with_suffix(&cfg.output, ".lower.tsv");
    let upper_path = with_suffix(&cfg.output, ".upper.tsv");
    write(&lower_path, &buf_l)?;
    write(&upper_path, &buf_u)?;
    let opt = |t: f64| if t == f64::NEG_INFINITY { json!("-inf") } else { json!(t) };
    let summary = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "command": "bounds-curve",
        "method": cfg.method.to_string(),
        "weights": c.weights.name(),
        "lower": {
            "file": lower_path.file_name().map(|f| f.to_string_lossy()),
            "rows": lower.breakpoints().len(),
            "argmax": opt(lo.t),
            "max": lo.value,
        },
        "upper": {
            "file": upper_path.file_name().map(|f| f.to_string_lossy()),
            "rows": upper.breakpoints().len(),
            "argmin": opt(hi.t),
            "min": hi.value,
            "theta_u": 1.0 + hi.value,
        },
        "note": c.note,
        "estimate": a.report["estimate"],
        "seeds": a.report["seeds"],
        "config": a.report["config"],
    });
    write(&with_suffix(&cfg.output, ".curve.json"), &pretty(&summary))?;
    Ok(format!(
        "lower curve: {} rows, max {} at t = {}\nupper curve: {} rows, min {} at t = {}\n",
        lower.breakpoints().len(),
        lo.value,
        lo.t,
        upper.breakpoints().len(),
        hi.value,
        hi.t
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dkw_p_value_inverts_the_critical_value() {
        let c = dtebounds::finite_sample::dkw_critical(0.05, 100, 80).unwrap();
        assert!((dkw_p_value(c, 100, 80) - 0.05).abs() < 1e-12);
        assert_eq!(dkw_p_value(0.0, 10, 10), 1.0);
    }

    #[test]
    fn suffixes_append() {
        assert_eq!(with_suffix(Path::new("out/run"), ".json"), PathBuf::from("out/run.json"));
    }
}
