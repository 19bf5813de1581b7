//! The simulate subcommand: Monte Carlo tables for the built-in design.

use std::fmt::Write as _;
use std::fs;

use dtebounds::sim::{parse_cells, run_table, DgpSpec, McConfig};
use serde_json::json;

use crate::analyze::with_suffix;
use crate::config::{parse_grid, RunConfig};
use crate::CliError;

pub fn mc_config(cfg: &RunConfig) -> Result<McConfig, CliError> {
    Ok(McConfig {
        reps: cfg.reps,
        alpha: cfg.alpha,
        seed: cfg.seed,
        k_folds: cfg.k_folds,
        theta0: cfg.theta0,
        theta0_reps: cfg.theta0_reps,
        inner_reps: cfg.inner_reps,
        grid: parse_grid(&cfg.grid)?,
        cv_folds: cfg.cv_folds,
        aux_fraction: cfg.aux_fraction,
        ..McConfig::default()
    })
}

/// Writes `<output>.csv` (one row per cell) and `<output>.json` (the full
/// report with seeds and the resolved configuration). Cell failures are
/// recorded, not fatal.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let path = cfg.cells.as_ref().ok_or_else(|| CliError::config("cells", "no cell file given"))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let cells = parse_cells(&text).map_err(|e| CliError::core(path.display().to_string(), e))?;
    let report = run_table(&DgpSpec::default(), &cells, &mc_config(cfg)?)?;

    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let csv_path = with_suffix(&cfg.output, ".csv");
    let json_path = with_suffix(&cfg.output, ".json");
    if let Some(dir) = csv_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(&csv_path, csv).map_err(|e| CliError::Io(format!("{}: {e}", csv_path.display())))?;
    let sidecar = json!({ "report": report, "config": cfg });
    let mut body = serde_json::to_string_pretty(&sidecar).expect("report serializes");
    body.push('\n');
    fs::write(&json_path, body).map_err(|e| CliError::Io(format!("{}: {e}", json_path.display())))?;

    let mut out = String::new();
    let _ = writeln!(out, "theta0 = {:.4} (se {:.1e})", report.theta0, report.theta0_se);
    let _ = writeln!(
        out,
        "{:<24}{:<14}{:>6}{:>4}{:>9}{:>10}{:>9}{:>8}",
        "model", "estimator", "n", "p", "rej. 0", "rej. th0", "length", "failed"
    );
    for c in &report.cells {
        let _ = writeln!(
            out,
            "{:<24}{:<14}{:>6}{:>4}{:>9.3}{:>10.3}{:>9.3}{:>8}",
            c.model.to_string(),
            c.estimator.to_string(),
            c.n,
            c.p,
            c.reject_zero,
            c.reject_theta0,
            c.avg_length,
            c.failures
        );
    }
    for note in &report.notes {
        let _ = writeln!(out, "note: {note}");
    }
    let _ = writeln!(out, "wrote {} and {}", csv_path.display(), json_path.display());
    Ok(out)
}
