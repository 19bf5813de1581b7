//! Run configuration: defaults, then a key=value file (or the `config`
//! object of an earlier JSON report), then command-line flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dtebounds::cond_cdf::{GridSpec, ModelSpec};
use dtebounds::cross_fit::HRule;
use serde::{Deserialize, Serialize};

/// A configuration problem, always reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn bad(field: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError(format!("{field}: {msg}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SampleSplit,
    CrossFit,
    Sjls,
    CrossFitGroup,
    CrossFitIpw,
    CrossFitFoldt,
}

pub const METHODS: [&str; 6] = ["sample-split", "cross-fit", "sjls", "cross-fit-group", "cross-fit-ipw", "cross-fit-foldt"];

impl FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Ok(match s.trim() {
            "sample-split" => Method::SampleSplit,
            "cross-fit" => Method::CrossFit,
            "sjls" => Method::Sjls,
            "cross-fit-group" => Method::CrossFitGroup,
            "cross-fit-ipw" => Method::CrossFitIpw,
            "cross-fit-foldt" => Method::CrossFitFoldt,
            other => return Err(bad("method", format!("unknown method '{other}'; valid methods: {}", METHODS.join(", ")))),
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = *self as usize;
        f.write_str(METHODS[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropensityMode {
    InSample,
    ConstantKnown,
    Group,
    KnownFunction,
}

impl FromStr for PropensityMode {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Ok(match s.trim() {
            "in_sample" => PropensityMode::InSample,
            "constant_known" => PropensityMode::ConstantKnown,
            "group" => PropensityMode::Group,
            "known_function" => PropensityMode::KnownFunction,
            other => {
                return Err(bad(
                    "propensity.mode",
                    format!("unknown mode '{other}'; expected in_sample, constant_known, group or known_function"),
                ))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HRuleName {
    Loglog,
    Log,
    QLoglog,
}

impl FromStr for HRuleName {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Ok(match s.trim() {
            "loglog" => HRuleName::Loglog,
            "log" => HRuleName::Log,
            "q-loglog" => HRuleName::QLoglog,
            other => return Err(bad("h_rule", format!("unknown rule '{other}'; expected loglog, log or q-loglog"))),
        })
    }
}

impl HRuleName {
    pub fn rule(self, q: f64) -> HRule {
        match self {
            HRuleName::Loglog => HRule::LogLog,
            HRuleName::Log => HRule::Log,
            HRuleName::QLoglog => HRule::QLogLog { q },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropensityConfig {
    pub mode: PropensityMode,
    pub pi: Option<f64>,
    /// Column holding group labels (group mode) or per-unit probabilities
    /// (known_function mode).
    pub column: Option<String>,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig { mode: PropensityMode::InSample, pi: None, column: None }
    }
}

/// Everything a run depends on. Reports embed it so a run can be repeated
/// from its own report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub y: String,
    pub d: String,
    pub x_prefix: String,
    pub alpha: f64,
    pub delta: f64,
    pub method: Method,
    pub models: Vec<String>,
    /// Columns with user-supplied lower and upper adjusters; replaces `models`.
    pub adjuster_lower: Option<String>,
    pub adjuster_upper: Option<String>,
    pub k_folds: usize,
    pub cv_folds: usize,
    pub aux_fraction: f64,
    pub propensity: PropensityConfig,
    pub h_rule: HRuleName,
    pub q: f64,
    pub grid: String,
    pub squash: bool,
    pub seed: u64,
    pub output: PathBuf,
    pub cells: Option<PathBuf>,
    pub reps: usize,
    pub theta0: Option<f64>,
    pub theta0_reps: usize,
    pub inner_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            input: None,
            y: "y".into(),
            d: "d".into(),
            x_prefix: "x".into(),
            alpha: 0.05,
            delta: 0.0,
            method: Method::CrossFit,
            models: vec!["constant".into()],
            adjuster_lower: None,
            adjuster_upper: None,
            k_folds: 5,
            cv_folds: 5,
            aux_fraction: 0.5,
            propensity: PropensityConfig::default(),
            h_rule: HRuleName::Loglog,
            q: 2.0,
            grid: "random_normal:10000".into(),
            squash: false,
            seed: 0,
            output: PathBuf::from("dtebounds_report"),
            cells: None,
            reps: 1000,
            theta0: None,
            theta0_reps: 10_000_000,
            inner_reps: 2000,
        }
    }
}

fn parse_num<T: FromStr>(field: &str, v: &str) -> Result<T, ConfigError> {
    v.trim().parse().map_err(|_| bad(field, format!("cannot parse '{v}'")))
}

fn parse_bool(field: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(bad(field, format!("expected true or false, found '{other}'"))),
    }
}

pub fn parse_grid(v: &str) -> Result<GridSpec, ConfigError> {
    let (kind, size) = v.split_once(':').unwrap_or((v, "10000"));
    let size: usize = parse_num("grid", size)?;
    match kind.trim() {
        "random_normal" => Ok(GridSpec::RandomNormal { size }),
        "equispaced" => Ok(GridSpec::Equispaced { size }),
        other => Err(bad("grid", format!("unknown grid '{other}'; expected random_normal:N or equispaced:N"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let opt = |v: &str| (!v.is_empty()).then(|| v.to_string());
        match key.trim().replace('-', "_").as_str() {
            "input" => self.input = opt(v).map(PathBuf::from),
            "y" => self.y = v.into(),
            "d" => self.d = v.into(),
            "x_prefix" => self.x_prefix = v.into(),
            "alpha" => self.alpha = parse_num("alpha", v)?,
            "delta" => self.delta = parse_num("delta", v)?,
            "method" => self.method = v.parse()?,
            "model" | "models" => {
                self.models = v.split(';').map(str::trim).filter(|m| !m.is_empty()).map(String::from).collect()
            }
            "adjuster.lower" | "adjuster_lower" => self.adjuster_lower = opt(v),
            "adjuster.upper" | "adjuster_upper" => self.adjuster_upper = opt(v),
            "k_folds" => self.k_folds = parse_num("k_folds", v)?,
            "cv_folds" => self.cv_folds = parse_num("cv_folds", v)?,
            "aux_fraction" => self.aux_fraction = parse_num("aux_fraction", v)?,
            "propensity.mode" | "propensity_mode" => self.propensity.mode = v.parse()?,
            "propensity.pi" | "propensity_pi" => self.propensity.pi = Some(parse_num("propensity.pi", v)?),
            "propensity.column" | "propensity_column" => self.propensity.column = opt(v),
            "h_rule" => self.h_rule = v.parse()?,
            "q" => self.q = parse_num("q", v)?,
            "grid" => {
                parse_grid(v)?;
                self.grid = v.into();
            }
            "squash" => self.squash = parse_bool("squash", v)?,
            "seed" => self.seed = parse_num("seed", v)?,
            "output" => self.output = PathBuf::from(v),
            "cells" => self.cells = opt(v).map(PathBuf::from),
            "reps" => self.reps = parse_num("reps", v)?,
            "theta0" => self.theta0 = Some(parse_num("theta0", v)?),
            "theta0_reps" => self.theta0_reps = parse_num("theta0_reps", v)?,
            "inner_reps" => self.inner_reps = parse_num("inner_reps", v)?,
            other => return Err(bad(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Reads a key=value file, or the `config` object of a JSON report.
    pub fn from_file(path: &Path) -> Result<Self, FileError> {
        let text = fs::read_to_string(path).map_err(|e| FileError::Io(format!("{}: {e}", path.display())))?;
        if text.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| FileError::Config(bad("config", format!("{}: {e}", path.display()))))?;
            let cfg = v.get("config").cloned().unwrap_or(v);
            return serde_json::from_value(cfg)
                .map_err(|e| FileError::Config(bad("config", format!("{}: {e}", path.display()))));
        }
        let mut cfg = RunConfig::default();
        let mut models: Vec<String> = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                FileError::Config(bad("config", format!("{} line {}: expected key = value", path.display(), k + 1)))
            })?;
            if matches!(key.trim(), "model" | "models") {
                models.extend(value.split(';').map(str::trim).filter(|m| !m.is_empty()).map(String::from));
                continue;
            }
            cfg.set(key, value).map_err(FileError::Config)?;
        }
        if !models.is_empty() {
            cfg.models = models;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(bad("alpha", format!("{} must lie in (0, 1)", self.alpha)));
        }
        if !self.delta.is_finite() {
            return Err(bad("delta", "must be finite"));
        }
        if !(self.aux_fraction > 0.0 && self.aux_fraction < 1.0) {
            return Err(bad("aux_fraction", format!("{} must lie in (0, 1)", self.aux_fraction)));
        }
        if self.k_folds < 2 {
            return Err(bad("k_folds", "must be at least 2"));
        }
        if self.cv_folds < 2 {
            return Err(bad("cv_folds", "must be at least 2"));
        }
        if self.q < 2.0 {
            return Err(bad("q", format!("{} must be at least 2", self.q)));
        }
        parse_grid(&self.grid)?;
        self.model_specs()?;
        if self.adjuster_lower.is_some() != self.adjuster_upper.is_some() {
            return Err(bad("adjuster", "give both adjuster.lower and adjuster.upper, or neither"));
        }
        let p = &self.propensity;
        match p.mode {
            PropensityMode::ConstantKnown => match p.pi {
                Some(pi) if pi > 0.0 && pi < 1.0 => {}
                Some(pi) => return Err(bad("propensity.pi", format!("{pi} must lie in (0, 1)"))),
                None => return Err(bad("propensity.pi", "required for constant_known mode")),
            },
            PropensityMode::Group | PropensityMode::KnownFunction if p.column.is_none() => {
                return Err(bad("propensity.column", "required for group and known_function modes"));
            }
            _ => {}
        }
        match self.method {
            Method::CrossFitGroup if p.mode != PropensityMode::Group => {
                Err(bad("propensity.mode", "method cross-fit-group needs propensity.mode = group"))
            }
            Method::CrossFitIpw if !matches!(p.mode, PropensityMode::ConstantKnown | PropensityMode::KnownFunction) => {
                Err(bad("propensity.mode", "method cross-fit-ipw needs constant_known or known_function propensity"))
            }
            _ => Ok(()),
        }
    }

    pub fn model_specs(&self) -> Result<Vec<ModelSpec>, ConfigError> {
        if self.models.is_empty() {
            return Err(bad("models", "at least one model is required"));
        }
        self.models.iter().map(|m| m.parse().map_err(|e: dtebounds::Error| bad("models", e))).collect()
    }
}

pub enum FileError {
    Io(String),
    Config(ConfigError),
}
