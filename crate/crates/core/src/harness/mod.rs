//! Running experiments and grids, and writing their results.

mod svg;

use std::fs;
use std::io::BufWriter;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::config::{render_config, AutoLyapunov, ExperimentConfig, GridSpec, LyapunovChoice};
use crate::dynamics::{self, Trajectory};
use crate::format::sig17;
use crate::lyapunov::{
    check_h_monotone, energy_along, select_params, write_energy_csv, Direction, EnergyRecord,
    LyapunovParams, MonotoneReport, Regime, MONOTONE_TOL,
};
use crate::objective::Objective;
use crate::rates::{theoretical_rate, verify_series, z_from_series, RateVerdict, ZSequence, ZThresholds};
use crate::{Error, Result};

pub use svg::{emit_svg, render_svg, Series};

/// Everything computed for one experiment.
#[derive(Debug)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub trajectory: Trajectory,
    pub params: LyapunovParams,
    pub energy: Vec<EnergyRecord>,
    /// Monotonicity of `H` in the direction the sign of `K1` predicts;
    /// absent for manual parameters.
    pub monotone: Option<MonotoneReport>,
    pub z: Option<ZSequence>,
    pub verdict: Option<RateVerdict>,
    /// Why no verdict was produced, when it was not.
    pub notes: Vec<String>,
}

impl RunOutcome {
    /// A run fails when it stopped early or an asserted verdict fails.
    pub fn passed(&self) -> bool {
        self.trajectory.error.is_none() && self.verdict.as_ref().is_none_or(|v| v.passed())
    }
}

pub fn lyapunov_params(cfg: &ExperimentConfig, gamma: f64) -> Result<LyapunovParams> {
    match cfg.lyapunov {
        LyapunovChoice::Auto(AutoLyapunov::AutoSharp) => select_params(cfg.alpha, gamma, Some(Regime::Sharp)),
        LyapunovChoice::Auto(AutoLyapunov::AutoFlat) => select_params(cfg.alpha, gamma, Some(Regime::Flat)),
        LyapunovChoice::Manual { lambda, p } => LyapunovParams::manual(cfg.alpha, lambda, p),
    }
}

/// Direction of `H` the parameters predict, if any.
fn expected_direction(params: &LyapunovParams) -> Option<Direction> {
    match params.regime {
        Regime::Sharp if params.k1 > 0.0 => Some(Direction::Nondecreasing),
        Regime::Sharp => Some(Direction::Nonincreasing),
        Regime::Flat if params.alpha >= 2.0 * params.lambda + 1.0 => Some(Direction::Nonincreasing),
        _ => None,
    }
}

/// Simulates one configuration and evaluates its diagnostics. Nothing is
/// written to disk.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let obj = cfg.build_objective()?;
    let gamma = obj.nominal_gamma();
    let regime = theoretical_rate(cfg.alpha, gamma)?;
    let regime = cfg.rate_override.map_or(regime, |r| regime.with_exponent(r));
    let params = lyapunov_params(cfg, gamma)?;
    let trajectory = dynamics::run(cfg, &obj)?;
    let mut notes = cfg.warnings.clone();

    let last = trajectory.records.last().map(|r| r.x.clone()).unwrap_or_else(|| cfg.x0.clone());
    let x_star = obj.nearest_minimizer(&last);
    let energy = energy_along(&trajectory, &params, &x_star, regime.exponent);
    let monotone = match expected_direction(&params) {
        Some(d) if energy.len() >= 2 => Some(check_h_monotone(&energy, d, MONOTONE_TOL)?),
        _ => None,
    };

    let series = trajectory.gap_series();
    let z = match z_from_series(&series, regime.exponent) {
        Ok(z) => Some(z),
        Err(e) => {
            notes.push(format!("no z sequence: {e}"));
            None
        }
    };
    let verdict = if let Some(e) = &trajectory.error {
        notes.push(format!("run stopped early: {e}"));
        None
    } else if !cfg.supports_rate_verdict() {
        notes.push(format!(
            "no rate verdict: horizon {} is below ten times the start time {}",
            cfg.horizon(),
            cfg.start_time()
        ));
        None
    } else {
        match verify_series(&trajectory.objective, &series, &regime, &ZThresholds::default()) {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(format!("no rate verdict: {e}"));
                None
            }
        }
    };
    Ok(RunOutcome {
        config: cfg.clone(),
        trajectory,
        params,
        energy,
        monotone,
        z,
        verdict,
        notes,
    })
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

/// Writes `config.toml`, `trajectory.csv`, `energy.csv`, `z.csv`, `z.svg`
/// and `verdict.json` into `dir`.
pub fn write_outputs(outcome: &RunOutcome, dir: &Path, label: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), render_config(&outcome.config)?)?;
    outcome.trajectory.write_csv(create_file(&dir.join("trajectory.csv"))?)?;
    write_energy_csv(&outcome.energy, create_file(&dir.join("energy.csv"))?)?;
    if let Some(z) = &outcome.z {
        z.write_csv(create_file(&dir.join("z.csv"))?)?;
        emit_svg(
            &[Series {
                label: label.to_string(),
                points: z.points.clone(),
            }],
            &dir.join("z.svg"),
        )?;
    }
    fs::write(dir.join("verdict.json"), report_json(outcome)? + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    verdict: Option<serde_json::Value>,
    lyapunov: &'a LyapunovParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    monotone: Option<&'a MonotoneReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    notes: &'a [String],
    passed: bool,
}

/// JSON document for one run: the rate verdict plus the run diagnostics.
pub fn report_json(outcome: &RunOutcome) -> Result<String> {
    let verdict = match &outcome.verdict {
        Some(v) => Some(serde_json::from_str(&v.to_json()?)?),
        None => None,
    };
    let report = Report {
        verdict,
        lyapunov: &outcome.params,
        monotone: outcome.monotone.as_ref(),
        error: outcome.trajectory.error.as_deref(),
        notes: &outcome.notes,
        passed: outcome.passed(),
    };
    Ok(serde_json::to_string_pretty(&report)?)
}

/// One line of the grid summary.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub index: usize,
    pub label: String,
    pub alpha: f64,
    pub gamma: f64,
    pub status: CellStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Done {
        verdict: Option<RateVerdict>,
        passed: bool,
        z: Option<Vec<(f64, f64)>>,
    },
    Failed(String),
}

impl CellSummary {
    pub fn passed(&self) -> bool {
        matches!(self.status, CellStatus::Done { passed: true, .. })
    }
}

#[derive(Clone, Debug)]
pub struct GridReport {
    pub root: PathBuf,
    pub cells: Vec<CellSummary>,
}

impl GridReport {
    pub fn passed(&self) -> bool {
        self.cells.iter().all(CellSummary::passed)
    }
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn run_cell(grid: &GridSpec, index: usize) -> CellSummary {
    let (alpha, gamma) = grid.cells[index];
    let label = grid.cell_label(index);
    let result = catch_unwind(AssertUnwindSafe(|| -> Result<CellStatus> {
        let cfg = grid.cell_config(index)?;
        let outcome = run_experiment(&cfg)?;
        write_outputs(&outcome, &cfg.output, &label)?;
        Ok(CellStatus::Done {
            passed: outcome.passed(),
            verdict: outcome.verdict,
            z: outcome.z.map(|z| z.points),
        })
    }));
    let status = match result {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => CellStatus::Failed(e.to_string()),
        Err(p) => CellStatus::Failed(format!("panicked: {}", panic_message(p))),
    };
    CellSummary {
        index,
        label,
        alpha,
        gamma,
        status,
    }
}

/// Runs every cell on a pool of `grid.parallelism` workers. Each cell
/// writes only inside its own directory; a failing or panicking cell is
/// recorded in the summary and does not affect the others. The summary
/// table and the combined plot are written after all cells finish.
pub fn run_grid(grid: &GridSpec) -> Result<GridReport> {
    if grid.cells.is_empty() {
        return Err(Error::config("grid has no cells"));
    }
    let root = grid.output_root();
    fs::create_dir_all(&root)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(grid.parallelism.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    let cells: Vec<CellSummary> =
        pool.install(|| (0..grid.cells.len()).into_par_iter().map(|i| run_cell(grid, i)).collect());
    let report = GridReport { root, cells };
    write_summary(&report)?;
    let series: Vec<Series> = report
        .cells
        .iter()
        .filter_map(|c| match &c.status {
            CellStatus::Done { z: Some(z), .. } => Some(Series {
                label: c.label.clone(),
                points: z.clone(),
            }),
            _ => None,
        })
        .collect();
    if !series.is_empty() {
        emit_svg(&series, &report.root.join("z.svg"))?;
    }
    Ok(report)
}

const SUMMARY_HEADER: [&str; 12] = [
    "cell",
    "alpha",
    "gamma",
    "branch",
    "theoretical",
    "fitted",
    "fitted_err",
    "z_tail_ratio",
    "boundedness",
    "nonvanishing",
    "passed",
    "status",
];

fn asserted(value: bool, is_asserted: bool) -> String {
    match (value, is_asserted) {
        (true, true) => "pass".into(),
        (false, true) => "FAIL".into(),
        (true, false) => "pass (not asserted)".into(),
        (false, false) => "fail (not asserted)".into(),
    }
}

fn summary_row(c: &CellSummary) -> Vec<String> {
    let mut row = vec![c.label.clone(), c.alpha.to_string(), c.gamma.to_string()];
    match &c.status {
        CellStatus::Done { verdict: Some(v), passed, .. } => {
            row.extend([
                v.branch.to_string(),
                sig17(v.theoretical),
                sig17(v.fitted),
                sig17(v.fitted_err),
                sig17(v.z_tail_ratio),
                asserted(v.boundedness, v.asserts_boundedness()),
                asserted(v.nonvanishing, v.asserts_nonvanishing()),
                passed.to_string(),
                "ok".into(),
            ]);
        }
        CellStatus::Done { verdict: None, passed, .. } => {
            row.extend(std::iter::repeat_n(String::new(), 7));
            row.push(passed.to_string());
            row.push("no verdict".into());
        }
        CellStatus::Failed(msg) => {
            row.extend(std::iter::repeat_n(String::new(), 7));
            row.push("false".into());
            row.push(format!("failed: {msg}"));
        }
    }
    row
}

/// Writes `summary.csv` and `summary.txt` under the grid root.
pub fn write_summary(report: &GridReport) -> Result<()> {
    let mut csv_out = csv::Writer::from_writer(create_file(&report.root.join("summary.csv"))?);
    csv_out.write_record(SUMMARY_HEADER)?;
    for c in &report.cells {
        csv_out.write_record(summary_row(c))?;
    }
    csv_out.flush()?;
    fs::write(report.root.join("summary.txt"), summary_text(report))?;
    Ok(())
}

/// Fixed-width table of theoretical against fitted exponents.
pub fn summary_text(report: &GridReport) -> String {
    let mut out = format!(
        "{:<28} {:>6} {:>6} {:<18} {:>9} {:>16} {:>9} {:<20} {:<20} {}\n",
        "cell", "alpha", "gamma", "branch", "rate", "fitted", "z tail", "bounded", "nonvanishing", "status"
    );
    for c in &report.cells {
        match &c.status {
            CellStatus::Done { verdict: Some(v), passed, .. } => out.push_str(&format!(
                "{:<28} {:>6} {:>6} {:<18} {:>9.4} {:>8.4} ± {:<5.3} {:>9.3} {:<20} {:<20} {}\n",
                c.label,
                c.alpha,
                c.gamma,
                v.branch,
                v.theoretical,
                v.fitted,
                v.fitted_err,
                v.z_tail_ratio,
                asserted(v.boundedness, v.asserts_boundedness()),
                asserted(v.nonvanishing, v.asserts_nonvanishing()),
                if *passed { "ok" } else { "FAILED" },
            )),
            CellStatus::Done { verdict: None, passed, .. } => out.push_str(&format!(
                "{:<28} {:>6} {:>6} no verdict{}\n",
                c.label,
                c.alpha,
                c.gamma,
                if *passed { "" } else { " (run stopped early)" }
            )),
            CellStatus::Failed(msg) => out.push_str(&format!(
                "{:<28} {:>6} {:>6} FAILED: {msg}\n",
                c.label, c.alpha, c.gamma
            )),
        }
    }
    out
}
