//! Experiment configuration: TOML documents for single runs and grids.
//!
//! Parsing is strict: unknown keys are rejected, and every invariant between
//! fields is checked before anything runs. A parsed [`ExperimentConfig`] has
//! all defaults filled in, so rendering it back with [`render_config`] and
//! re-parsing gives the same value.

use std::fmt;
use std::path::PathBuf;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};

use crate::objective::{Objective, ObjectiveSpec};
use crate::rates::theoretical_rate;
use crate::{Error, Result};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_DT: f64 = 1e-4;
pub const DEFAULT_T0: f64 = 0.1;
pub const DEFAULT_STRIDE: u64 = 100;
pub const DEFAULT_OUTPUT: &str = "out";

/// Environment variable overriding the grid worker count.
pub const WORKERS_ENV: &str = "INERTIAL_RATES_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Nesterov,
    ProxNesterov,
    OdeRk4,
}

impl Mode {
    pub fn is_scheme(self) -> bool {
        !matches!(self, Mode::OdeRk4)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Nesterov => "nesterov",
            Mode::ProxNesterov => "prox-nesterov",
            Mode::OdeRk4 => "ode-rk4",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nesterov" => Ok(Mode::Nesterov),
            "prox-nesterov" => Ok(Mode::ProxNesterov),
            "ode-rk4" => Ok(Mode::OdeRk4),
            other => Err(Error::config(format!(
                "unknown mode {other:?} (expected nesterov, prox-nesterov or ode-rk4)"
            ))),
        }
    }
}

/// How the Lyapunov parameters of a run are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LyapunovChoice {
    Auto(AutoLyapunov),
    Manual { lambda: f64, p: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AutoLyapunov {
    AutoSharp,
    AutoFlat,
}

/// A fully resolved single experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: String,
    pub alpha: f64,
    pub mode: Mode,
    /// Scheme step size; physical time is `n * sqrt(h)`.
    pub h: f64,
    /// Integrator step.
    pub dt: f64,
    /// Integrator start time.
    pub t0: f64,
    pub steps: u64,
    pub x0: Vec<f64>,
    pub stride: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_override: Option<f64>,
    pub lyapunov: LyapunovChoice,
    pub seed: u64,
    pub output: PathBuf,
    /// Non-fatal remarks produced while resolving the configuration.
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    /// Physical end time of the run.
    pub fn horizon(&self) -> f64 {
        match self.mode {
            Mode::OdeRk4 => self.integrator_t0() + self.steps as f64 * self.dt,
            _ => self.steps as f64 * self.h.sqrt(),
        }
    }

    /// First physical time at which a rate can be measured.
    pub fn start_time(&self) -> f64 {
        match self.mode {
            Mode::OdeRk4 => self.integrator_t0(),
            _ => self.h.sqrt(),
        }
    }

    /// The integrator never starts before one step: the damping `alpha/t`
    /// is singular at 0.
    pub fn integrator_t0(&self) -> f64 {
        self.t0.max(self.dt)
    }

    /// Rate verdicts need the horizon to reach ten times the start time.
    pub fn supports_rate_verdict(&self) -> bool {
        self.horizon() >= 10.0 * self.start_time()
    }

    pub fn build_objective(&self) -> Result<ObjectiveSpec> {
        self.objective.parse()
    }
}

/// Cells of a grid plus the settings they share.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    /// `(alpha, gamma)` pairs in execution order.
    pub cells: Vec<(f64, f64)>,
    /// Objective family template, e.g. `power` or `power:dim=2`; `gamma` is
    /// substituted per cell.
    pub family: String,
    pub shared: SharedSettings,
    pub parallelism: usize,
}

/// Settings a grid applies to every cell. `None` means "use the default".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedSettings {
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub h: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub t0: Option<f64>,
    #[serde(default, deserialize_with = "de_opt_count")]
    pub steps: Option<u64>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default, deserialize_with = "de_opt_count")]
    pub stride: Option<u64>,
    #[serde(default)]
    pub rate_override: Option<f64>,
    #[serde(default)]
    pub lyapunov: Option<LyapunovSetting>,
    #[serde(default, deserialize_with = "de_opt_count")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Lyapunov setting as written in a document; `"auto"` defers the choice to
/// the cell's regime.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LyapunovSetting {
    Named(LyapunovName),
    Manual { lambda: f64, p: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LyapunovName {
    Auto,
    AutoSharp,
    AutoFlat,
}

/// What a configuration document describes.
#[derive(Clone, Debug, PartialEq)]
pub enum ParsedConfig {
    Single(ExperimentConfig),
    Grid(GridSpec),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridTable {
    #[serde(default)]
    cells: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    alphas: Option<Vec<f64>>,
    #[serde(default)]
    gammas: Option<Vec<f64>>,
    #[serde(default = "default_family")]
    family: String,
    #[serde(default, deserialize_with = "de_opt_count")]
    parallelism: Option<u64>,
}

fn default_family() -> String {
    "power".to_string()
}

/// Counts may be written as integers or as integral floats (`1e6`).
fn de_opt_count<'de, D>(d: D) -> std::result::Result<Option<u64>, D::Error>
where
    D: Deserializer<'de>,
{
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Count {
        Int(u64),
        Float(f64),
    }
    match Option::<Count>::deserialize(d)? {
        None => Ok(None),
        Some(Count::Int(n)) => Ok(Some(n)),
        Some(Count::Float(f)) => float_to_count(f).map(Some).map_err(de::Error::custom),
    }
}

/// Accepts `1e6` style counts from the command line and config files.
pub fn float_to_count(f: f64) -> std::result::Result<u64, String> {
    if f.is_finite() && f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64 {
        Ok(f as u64)
    } else {
        Err(format!("expected a non-negative whole number, got {f}"))
    }
}

/// Parses a count written as `1000000` or `1e6`.
pub fn parse_count(s: &str) -> std::result::Result<u64, String> {
    if let Ok(n) = s.parse::<u64>() {
        return Ok(n);
    }
    let f: f64 = s.parse().map_err(|_| format!("not a number: {s:?}"))?;
    float_to_count(f)
}

/// Parses a TOML document describing either one experiment or a grid
/// (a document with a `[grid]` table).
pub fn parse_config(text: &str) -> Result<ParsedConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    if let Some(grid) = table.remove("grid") {
        let grid: GridTable = grid
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("[grid]: {e}")))?;
        let shared: SharedSettings = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        return build_grid(grid, shared).map(ParsedConfig::Grid);
    }
    let objective = match table.remove("objective") {
        Some(toml::Value::String(s)) => s,
        Some(other) => return Err(Error::config(format!("objective must be a string, got {other}"))),
        None => return Err(Error::config("objective is required")),
    };
    let alpha = match table.remove("alpha") {
        Some(toml::Value::Float(f)) => f,
        Some(toml::Value::Integer(i)) => i as f64,
        Some(other) => return Err(Error::config(format!("alpha must be a number, got {other}"))),
        None => return Err(Error::config("alpha is required")),
    };
    let shared: SharedSettings = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    resolve(&objective, alpha, &shared).map(ParsedConfig::Single)
}

/// Parses a document that must describe a single experiment.
pub fn parse_experiment(text: &str) -> Result<ExperimentConfig> {
    match parse_config(text)? {
        ParsedConfig::Single(cfg) => Ok(cfg),
        ParsedConfig::Grid(_) => Err(Error::config("expected a single experiment, found a [grid] table")),
    }
}

/// Renders a resolved configuration as TOML.
pub fn render_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::config(format!("cannot render config: {e}")))
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be a positive number, got {v}")))
    }
}

fn default_x0(obj: &ObjectiveSpec) -> Vec<f64> {
    match obj.family() {
        // start outside the plateau, otherwise nothing moves
        "plateau" => {
            let edge = obj.nearest_minimizer(&[f64::INFINITY])[0];
            vec![edge + 0.5]
        }
        "lsq" => vec![0.0; obj.dim()],
        _ => vec![0.5; obj.dim()],
    }
}

/// Fills defaults and validates one experiment.
pub fn resolve(objective: &str, alpha: f64, s: &SharedSettings) -> Result<ExperimentConfig> {
    let obj: ObjectiveSpec = objective.parse()?;
    check_positive("alpha", alpha)?;
    let gamma = obj.nominal_gamma();
    let mut warnings = Vec::new();

    let mode = match s.mode {
        Some(m) => m,
        None if gamma < 2.0 => Mode::ProxNesterov,
        None => Mode::Nesterov,
    };
    if mode == Mode::Nesterov && gamma < 2.0 {
        warnings.push(format!(
            "gradient steps on {} (gamma = {gamma} < 2): the gradient is not Lipschitz at the minimizer",
            obj.name()
        ));
    }
    if mode == Mode::ProxNesterov && !obj.has_prox() {
        return Err(Error::config(format!("mode prox-nesterov needs a proximal map, {} has none", obj.name())));
    }

    let h = s.h.unwrap_or(DEFAULT_H);
    let dt = s.dt.unwrap_or(DEFAULT_DT);
    let t0 = s.t0.unwrap_or(DEFAULT_T0);
    check_positive("h", h)?;
    check_positive("dt", dt)?;
    check_positive("t0", t0)?;
    let steps = s.steps.ok_or_else(|| Error::config("steps is required"))?;
    if steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    let stride = s.stride.unwrap_or(DEFAULT_STRIDE);
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    let x0 = s.x0.clone().unwrap_or_else(|| default_x0(&obj));
    if x0.len() != obj.dim() {
        return Err(Error::config(format!(
            "x0 has {} coordinates but {} lives in dimension {}",
            x0.len(),
            obj.name(),
            obj.dim()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("x0 must be finite"));
    }
    if let Some(r) = s.rate_override {
        if !r.is_finite() {
            return Err(Error::config("rate_override must be finite"));
        }
    }

    let lyapunov = match s.lyapunov.unwrap_or(LyapunovSetting::Named(LyapunovName::Auto)) {
        LyapunovSetting::Manual { lambda, p } => {
            if !lambda.is_finite() || !p.is_finite() {
                return Err(Error::config("manual lyapunov parameters must be finite"));
            }
            LyapunovChoice::Manual { lambda, p }
        }
        LyapunovSetting::Named(LyapunovName::AutoSharp) => LyapunovChoice::Auto(AutoLyapunov::AutoSharp),
        LyapunovSetting::Named(LyapunovName::AutoFlat) => {
            if !(gamma > 2.0) {
                return Err(Error::config(format!("lyapunov auto-flat needs gamma > 2, got {gamma}")));
            }
            LyapunovChoice::Auto(AutoLyapunov::AutoFlat)
        }
        LyapunovSetting::Named(LyapunovName::Auto) => {
            let flat = gamma > 2.0 && alpha >= (gamma + 2.0) / (gamma - 2.0);
            LyapunovChoice::Auto(if flat {
                AutoLyapunov::AutoFlat
            } else {
                AutoLyapunov::AutoSharp
            })
        }
    };

    let canonical = match obj.family() {
        "lsq" => objective.trim().to_string(),
        _ => obj.name().to_string(),
    };
    let seed = s.seed.unwrap_or(0);
    // TOML integers are signed 64-bit, larger seeds could not be written back
    if seed > i64::MAX as u64 {
        return Err(Error::config(format!("seed must be at most {}, got {seed}", i64::MAX)));
    }
    let cfg = ExperimentConfig {
        objective: canonical,
        alpha,
        mode,
        h,
        dt,
        t0,
        steps,
        x0,
        stride,
        rate_override: s.rate_override,
        lyapunov,
        seed,
        output: s.output.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT)),
        warnings,
    };
    // sanity: the regime table must accept the pair
    theoretical_rate(alpha, gamma)?;
    Ok(cfg)
}

fn build_grid(grid: GridTable, shared: SharedSettings) -> Result<GridSpec> {
    let cells = match (grid.cells, grid.alphas, grid.gammas) {
        (Some(cells), None, None) => cells,
        (None, Some(alphas), Some(gammas)) => gammas
            .iter()
            .flat_map(|&g| alphas.iter().map(move |&a| (a, g)))
            .collect(),
        (None, None, None) => return Err(Error::config("[grid] needs either cells or alphas + gammas")),
        _ => {
            return Err(Error::config(
                "[grid] takes either cells = [[alpha, gamma], ...] or both alphas and gammas",
            ))
        }
    };
    if cells.is_empty() {
        return Err(Error::config("grid has no cells"));
    }
    let parallelism = match grid.parallelism {
        Some(0) => return Err(Error::config("parallelism must be at least 1")),
        Some(p) => p as usize,
        None => default_parallelism(),
    };
    let spec = GridSpec {
        cells,
        family: grid.family,
        shared,
        parallelism,
    };
    // every cell must resolve on its own
    for cell in spec.cells.iter().enumerate() {
        spec.cell_config(cell.0)?;
    }
    Ok(spec)
}

/// Worker count from [`WORKERS_ENV`], else the number of CPUs.
pub fn default_parallelism() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

impl GridSpec {
    /// Objective string for a given gamma.
    pub fn objective_for(&self, gamma: f64) -> String {
        let (family, rest) = self.family.split_once(':').unwrap_or((&self.family, ""));
        if rest.trim().is_empty() {
            format!("{family}:gamma={gamma}")
        } else {
            format!("{family}:gamma={gamma},{rest}")
        }
    }

    /// Directory-friendly label of a cell.
    pub fn cell_label(&self, index: usize) -> String {
        let (alpha, gamma) = self.cells[index];
        format!("{index:03}_alpha{alpha}_gamma{gamma}")
    }

    /// Resolved configuration of one cell; its output goes to a
    /// subdirectory named after the cell label.
    pub fn cell_config(&self, index: usize) -> Result<ExperimentConfig> {
        let (alpha, gamma) = self.cells[index];
        let mut cfg = resolve(&self.objective_for(gamma), alpha, &self.shared)
            .map_err(|e| Error::config(format!("cell {index} (alpha={alpha}, gamma={gamma}): {e}")))?;
        cfg.output = cfg.output.join(self.cell_label(index));
        Ok(cfg)
    }

    pub fn output_root(&self) -> PathBuf {
        self.shared
            .output
            .clone()
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_experiment("objective = \"power:gamma=2\"\nalpha = 6\nsteps = 1e6\n").unwrap();
        assert_eq!(cfg.mode, Mode::Nesterov);
        assert_eq!(cfg.h, DEFAULT_H);
        assert_eq!(cfg.stride, DEFAULT_STRIDE);
        assert_eq!(cfg.steps, 1_000_000);
        assert_eq!(cfg.objective, "power:gamma=2,dim=1");
        assert_eq!(cfg.x0, vec![0.5]);
        assert_eq!(cfg.lyapunov, LyapunovChoice::Auto(AutoLyapunov::AutoSharp));
        assert!(cfg.warnings.is_empty());
    }

    #[test]
    fn sharp_power_defaults_to_prox() {
        let cfg = parse_experiment("objective = \"power:gamma=1.5\"\nalpha = 1\nsteps = 10\n").unwrap();
        assert_eq!(cfg.mode, Mode::ProxNesterov);
    }

    #[test]
    fn forced_gradient_steps_warn() {
        let cfg = parse_experiment(
            "objective = \"power:gamma=1.5\"\nalpha = 1\nsteps = 10\nmode = \"nesterov\"\n",
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::Nesterov);
        assert_eq!(cfg.warnings.len(), 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("objective = \"power:gamma=2\"\nalpha = 6\nsteps = 10\nalhpa = 3\n");
        assert!(matches!(err, Err(Error::Config(_))));
        let err = parse_config("[grid]\ncells = [[1, 2]]\nsize = 3\n[x]\n");
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn invalid_combinations() {
        for doc in [
            "objective = \"power:gamma=2\"\nalpha = 6\nsteps = 10\nlyapunov = \"auto-flat\"\n",
            "objective = \"power:gamma=2\"\nalpha = -1\nsteps = 10\n",
            "objective = \"power:gamma=2\"\nalpha = 1\nsteps = 0\n",
            "objective = \"power:gamma=2\"\nalpha = 1\n",
            "objective = \"power:gamma=2\"\nalpha = 1\nsteps = 10\nx0 = [1, 2]\n",
            "objective = \"power:gamma=2\"\nalpha = 1\nsteps = 1.5\n",
            "objective = \"power:gamma=2\"\nalpha = 1\nsteps = 10\nstride = 0\n",
            "objective = \"power:gamma=2\"\nalpha = 1\nsteps = 10\nh = 0\n",
        ] {
            assert!(parse_config(doc).is_err(), "accepted: {doc}");
        }
    }

    #[test]
    fn auto_lyapunov_follows_regime() {
        let cfg = parse_experiment("objective = \"power:gamma=3\"\nalpha = 6\nsteps = 10\n").unwrap();
        assert_eq!(cfg.lyapunov, LyapunovChoice::Auto(AutoLyapunov::AutoFlat));
        let cfg = parse_experiment("objective = \"power:gamma=3\"\nalpha = 4\nsteps = 10\n").unwrap();
        assert_eq!(cfg.lyapunov, LyapunovChoice::Auto(AutoLyapunov::AutoSharp));
        let cfg = parse_experiment(
            "objective = \"power:gamma=3\"\nalpha = 4\nsteps = 10\nlyapunov = { lambda = 2, p = 4 }\n",
        )
        .unwrap();
        assert_eq!(cfg.lyapunov, LyapunovChoice::Manual { lambda: 2.0, p: 4.0 });
    }

    #[test]
    fn render_round_trips() {
        let cfg = parse_experiment(
            "objective = \"plateau:gamma=2,a=1\"\nalpha = 3\nsteps = 100\nrate_override = 2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.x0, vec![1.5]);
        let text = render_config(&cfg).unwrap();
        assert_eq!(parse_experiment(&text).unwrap(), cfg);
    }

    #[test]
    fn grid_from_pairs_and_ranges() {
        let ParsedConfig::Grid(g) = parse_config("steps = 100\n[grid]\ncells = [[1, 1.5], [6, 1.5]]\nparallelism = 2\n").unwrap()
        else {
            panic!("expected grid")
        };
        assert_eq!(g.cells, vec![(1.0, 1.5), (6.0, 1.5)]);
        assert_eq!(g.parallelism, 2);
        let c = g.cell_config(0).unwrap();
        assert_eq!(c.objective, "power:gamma=1.5,dim=1");
        assert_eq!(c.mode, Mode::ProxNesterov);
        assert!(c.output.ends_with("000_alpha1_gamma1.5"));

        let ParsedConfig::Grid(g) =
            parse_config("steps = 100\n[grid]\nalphas = [1, 4]\ngammas = [2, 3]\nfamily = \"power:dim=2\"\n").unwrap()
        else {
            panic!("expected grid")
        };
        assert_eq!(g.cells.len(), 4);
        assert_eq!(g.objective_for(3.0), "power:gamma=3,dim=2");
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(parse_config("steps = 100\n[grid]\ncells = []\n").is_err());
        assert!(parse_config("steps = 100\n[grid]\nalphas = [1]\n").is_err());
        assert!(parse_config("steps = 100\n[grid]\nparallelism = 0\ncells = [[1, 2]]\n").is_err());
    }

    #[test]
    fn counts_accept_scientific_notation() {
        assert_eq!(parse_count("1e6"), Ok(1_000_000));
        assert_eq!(parse_count("250"), Ok(250));
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("-3").is_err());
    }

    #[test]
    fn seed_must_fit_in_toml() {
        let big = SharedSettings {
            seed: Some(u64::MAX),
            ..SharedSettings::default()
        };
        assert!(matches!(resolve("power:gamma=2", 1.0, &big), Err(Error::Config(_))));
    }
}
