use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use inertial_rates::config::{
    parse_config, parse_count, resolve, LyapunovName, LyapunovSetting, Mode, ParsedConfig,
    SharedSettings,
};
use inertial_rates::harness::{report_json, run_experiment, run_grid, summary_text, write_outputs};
use inertial_rates::objective::{probe_h1, probe_h2, GeometryProbeReport, MinimizerSet, Objective, ObjectiveSpec};
use inertial_rates::rates::theoretical_rate;
use inertial_rates::Error;

#[derive(Parser)]
#[command(name = "inertial-rates", version, about = "Decay rates of the damped inertial ODE and its Nesterov discretization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file or from flags.
    Run(RunArgs),
    /// Run every cell of a grid config.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Test the flatness (H1) and growth (H2) inequalities on samples.
    Probe(ProbeArgs),
    /// Print the theoretical decay exponent and its branch.
    Rate {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        gamma: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with_all = ["objective", "alpha"])]
    config: Option<PathBuf>,
    /// e.g. `power:gamma=2`, `plateau:gamma=2,a=1`, `lsq:file=data.csv`
    #[arg(long, requires = "alpha")]
    objective: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of steps; `1e6` is accepted.
    #[arg(long, value_parser = parse_count)]
    steps: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    t0: Option<f64>,
    #[arg(long, value_parser = parse_count)]
    stride: Option<u64>,
    /// Starting point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
    #[arg(long)]
    rate_override: Option<f64>,
    /// `auto`, `auto-sharp` or `auto-flat`.
    #[arg(long, value_parser = parse_lyapunov)]
    lyapunov: Option<LyapunovName>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    objective: String,
    /// Flatness exponent to test.
    #[arg(long)]
    h1: Option<f64>,
    /// Growth exponent to test.
    #[arg(long)]
    h2: Option<f64>,
    /// Growth constant for H2.
    #[arg(long, default_value_t = 1.0)]
    k: f64,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_lyapunov(s: &str) -> Result<LyapunovName, String> {
    match s {
        "auto" => Ok(LyapunovName::Auto),
        "auto-sharp" => Ok(LyapunovName::AutoSharp),
        "auto-flat" => Ok(LyapunovName::AutoFlat),
        _ => Err(format!("expected auto, auto-sharp or auto-flat, got {s:?}")),
    }
}

/// Outcome of a command: whether asserted checks passed.
type Outcome = anyhow::Result<bool>;

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Config(_) | Error::InvalidParameter(_))
        )
    })
}

fn cmd_run(args: RunArgs) -> Outcome {
    let cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            match parse_config(&text)? {
                ParsedConfig::Single(cfg) => cfg,
                ParsedConfig::Grid(_) => {
                    return Err(Error::Config("this file describes a grid; use the grid command".into()).into())
                }
            }
        }
        None => {
            let objective = args
                .objective
                .as_deref()
                .ok_or_else(|| Error::Config("run needs --config or --objective and --alpha".into()))?;
            let alpha = args.alpha.ok_or_else(|| Error::Config("--alpha is required".into()))?;
            let shared = SharedSettings {
                mode: args.mode,
                h: args.h,
                dt: args.dt,
                t0: args.t0,
                steps: args.steps,
                x0: args.x0.clone(),
                stride: args.stride,
                rate_override: args.rate_override,
                lyapunov: args.lyapunov.map(LyapunovSetting::Named),
                seed: args.seed,
                output: args.output.clone(),
            };
            resolve(objective, alpha, &shared)?
        }
    };
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    let outcome = run_experiment(&cfg)?;
    write_outputs(&outcome, &cfg.output, &cfg.objective)
        .with_context(|| format!("writing results to {}", cfg.output.display()))?;
    println!("{}", report_json(&outcome)?);
    Ok(outcome.passed())
}

fn cmd_grid(config: PathBuf) -> Outcome {
    let text = std::fs::read_to_string(&config)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", config.display())))?;
    let grid = match parse_config(&text)? {
        ParsedConfig::Grid(g) => g,
        ParsedConfig::Single(_) => {
            return Err(Error::Config("this file describes a single run; use the run command".into()).into())
        }
    };
    let report = run_grid(&grid)?;
    print!("{}", summary_text(&report));
    println!("results in {}", report.root.display());
    Ok(report.passed())
}

/// Point of the minimizer set the probe ball is centred on. For an interval
/// the upper endpoint, where the geometry is not flat.
fn probe_center(obj: &ObjectiveSpec) -> Vec<f64> {
    match obj.minimizer_hint() {
        MinimizerSet::Point(p) => p,
        MinimizerSet::Interval { hi, .. } => vec![hi],
        MinimizerSet::Affine { point, .. } => point,
    }
}

fn print_probe(r: &GeometryProbeReport) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(r)?);
    Ok(())
}

fn cmd_probe(args: ProbeArgs) -> Outcome {
    if args.h1.is_none() && args.h2.is_none() {
        return Err(Error::Config("probe needs --h1 and/or --h2".into()).into());
    }
    let obj: ObjectiveSpec = args.objective.parse()?;
    let center = probe_center(&obj);
    let mut ok = true;
    if let Some(g) = args.h1 {
        let r = probe_h1(&obj, g, &center, args.radius, args.samples, args.seed)?;
        ok &= r.holds();
        print_probe(&r)?;
    }
    if let Some(exp) = args.h2 {
        let r = probe_h2(&obj, exp, args.k, &center, args.radius, args.samples, args.seed)?;
        ok &= r.holds();
        print_probe(&r)?;
    }
    Ok(ok)
}

fn cmd_rate(alpha: f64, gamma: f64) -> Outcome {
    let r = theoretical_rate(alpha, gamma)?;
    let mut line = format!("branch: {}\nexponent: {}", r.branch, r.exponent);
    if !r.upper_bound_proven() {
        line.push_str("\nupper bound: unproven");
    } else if !r.lower_bound_proven() {
        line.push_str("\noptimality: unproven");
    }
    println!("{line}");
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Grid { config } => cmd_grid(config),
        Command::Probe(args) => cmd_probe(args),
        Command::Rate { alpha, gamma } => cmd_rate(alpha, gamma),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
