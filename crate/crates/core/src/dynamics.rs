//! Trajectories of `x'' + (alpha/t) x' + grad F(x) = 0`.
//!
//! Two producers:
//!
//! - the Nesterov scheme `y_n = x_n + n/(n+alpha) (x_n - x_{n-1})`,
//!   `x_{n+1} = y_n - h grad F(y_n)` (or `prox_{hF}(y_n)`), read at physical
//!   time `t_n = n sqrt(h)`;
//! - classical RK4 on the first-order system `x' = v`,
//!   `v' = -(alpha/t) v - grad F(x)`, started at `t0 > 0`.

use std::io::Write;

use serde::Serialize;

use crate::config::{ExperimentConfig, Mode};
use crate::format::sig17;
use crate::linalg::{add_scaled, all_finite, dist, dot, norm, sub};
use crate::objective::Objective;
use crate::{Error, Result};

/// State of the discrete scheme. A zero initial velocity is encoded as
/// `x_prev == x_curr` at `n = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeState {
    pub n: u64,
    pub x_curr: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub alpha: f64,
    pub h: f64,
}

impl SchemeState {
    pub fn new(x0: Vec<f64>, alpha: f64, h: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::invalid(format!("step size h must be positive, got {h}")));
        }
        Ok(SchemeState {
            n: 0,
            x_prev: x0.clone(),
            x_curr: x0,
            alpha,
            h,
        })
    }

    /// Extrapolated point `y_n`.
    fn extrapolate(&self) -> Vec<f64> {
        let n = self.n as f64;
        let beta = n / (n + self.alpha);
        self.x_curr
            .iter()
            .zip(&self.x_prev)
            .map(|(x, p)| x + beta * (x - p))
            .collect()
    }

    fn advance(&self, x_next: Vec<f64>) -> Result<SchemeState> {
        if !all_finite(&x_next) {
            return Err(Error::NonFinite {
                step: self.n + 1,
                what: "iterate".into(),
            });
        }
        Ok(SchemeState {
            n: self.n + 1,
            x_prev: self.x_curr.clone(),
            x_curr: x_next,
            alpha: self.alpha,
            h: self.h,
        })
    }
}

/// One gradient step of the Nesterov scheme.
pub fn nesterov_step(state: &SchemeState, obj: &dyn Objective) -> Result<SchemeState> {
    let y = state.extrapolate();
    let g = obj.gradient(&y);
    if !all_finite(&g) {
        return Err(Error::NonFinite {
            step: state.n + 1,
            what: "gradient".into(),
        });
    }
    state.advance(add_scaled(&y, -state.h, &g))
}

/// One proximal step: same extrapolation, then `prox_{hF}`.
pub fn prox_nesterov_step(state: &SchemeState, obj: &dyn Objective) -> Result<SchemeState> {
    let y = state.extrapolate();
    let x = obj
        .prox(state.h, &y)
        .ok_or_else(|| Error::config(format!("{} has no proximal map", obj.name())))?;
    state.advance(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeState {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

/// Sub-steps are refined when a kink is closer than this many steps.
const KINK_WINDOW: f64 = 8.0;
/// Sub-step length as a fraction of the estimated time to the nearest kink.
const KINK_REFINE: f64 = 0.2;
/// Smallest sub-step, relative to `dt`.
const KINK_MIN_SUBSTEP: f64 = 1e-9;

fn acceleration(obj: &dyn Objective, alpha: f64, t: f64, x: &[f64], v: &[f64]) -> Vec<f64> {
    let g = obj.gradient(x);
    let damp = alpha / t;
    v.iter().zip(&g).map(|(vi, gi)| -damp * vi - gi).collect()
}

fn rk4(obj: &dyn Objective, alpha: f64, s: &OdeState, dt: f64) -> OdeState {
    let half = 0.5 * dt;
    let k1x = s.v.clone();
    let k1v = acceleration(obj, alpha, s.t, &s.x, &s.v);

    let x2 = add_scaled(&s.x, half, &k1x);
    let v2 = add_scaled(&s.v, half, &k1v);
    let k2v = acceleration(obj, alpha, s.t + half, &x2, &v2);
    let k2x = v2;

    let x3 = add_scaled(&s.x, half, &k2x);
    let v3 = add_scaled(&s.v, half, &k2v);
    let k3v = acceleration(obj, alpha, s.t + half, &x3, &v3);
    let k3x = v3;

    let x4 = add_scaled(&s.x, dt, &k3x);
    let v4 = add_scaled(&s.v, dt, &k3v);
    let k4v = acceleration(obj, alpha, s.t + dt, &x4, &v4);
    let k4x = v4;

    let w = dt / 6.0;
    let x = (0..s.x.len())
        .map(|i| s.x[i] + w * (k1x[i] + 2.0 * k2x[i] + 2.0 * k3x[i] + k4x[i]))
        .collect();
    let v = (0..s.v.len())
        .map(|i| s.v[i] + w * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]))
        .collect();
    OdeState { t: s.t + dt, x, v }
}

/// Rough time until (or since) the trajectory passes the nearest kink.
fn time_to_kink(obj: &dyn Objective, alpha: f64, s: &OdeState, kinks: &[Vec<f64>]) -> f64 {
    let speed = norm(&s.v);
    let acc = norm(&acceleration(obj, alpha, s.t, &s.x, &s.v));
    kinks
        .iter()
        .map(|c| {
            let d = dist(&s.x, c);
            if d == 0.0 {
                return 0.0;
            }
            let by_speed = if speed > 0.0 { d / speed } else { f64::INFINITY };
            let by_acc = if acc > 0.0 { (2.0 * d / acc).sqrt() } else { f64::INFINITY };
            by_speed.min(by_acc)
        })
        .fold(f64::INFINITY, f64::min)
}

fn rk4_with_kinks(
    obj: &dyn Objective,
    alpha: f64,
    state: &OdeState,
    dt: f64,
    kinks: &[Vec<f64>],
) -> OdeState {
    let trial = rk4(obj, alpha, state, dt);
    if kinks.is_empty() {
        return trial;
    }
    let window = KINK_WINDOW * dt;
    let crossed = kinks
        .iter()
        .any(|c| dot(&sub(&state.x, c), &sub(&trial.x, c)) <= 0.0);
    if !crossed
        && time_to_kink(obj, alpha, state, kinks) >= window
        && time_to_kink(obj, alpha, &trial, kinks) >= window
    {
        return trial;
    }
    // Graded sub-steps: near a kink the local error of a step of length s at
    // time distance d behaves like s^5 d^(gamma - 5), so keep s a fixed
    // fraction of d.
    let min_step = KINK_MIN_SUBSTEP * dt;
    let mut cur = state.clone();
    let mut done = 0.0;
    while done < dt {
        let remaining = dt - done;
        let mut step = (KINK_REFINE * time_to_kink(obj, alpha, &cur, kinks)).clamp(min_step, remaining);
        if remaining - step < min_step {
            step = remaining;
        }
        cur = rk4(obj, alpha, &cur, step);
        done += step;
    }
    cur.t = state.t + dt;
    cur
}

fn check_ode_args(state: &OdeState, alpha: f64, dt: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if !(state.t > 0.0) {
        return Err(Error::invalid(format!("integration must start at t > 0, got {}", state.t)));
    }
    if !(dt > 0.0) || dt >= state.t {
        return Err(Error::invalid(format!(
            "step dt = {dt} must satisfy 0 < dt < t = {}",
            state.t
        )));
    }
    Ok(())
}

/// One RK4 step of the damped system. Steps passing close to a point where
/// the gradient is not smooth are split into graded sub-steps; the step still
/// advances `t` by exactly `dt`.
pub fn ode_rk4_step(state: &OdeState, obj: &dyn Objective, alpha: f64, dt: f64) -> Result<OdeState> {
    check_ode_args(state, alpha, dt)?;
    let next = rk4_with_kinks(obj, alpha, state, dt, &obj.kinks());
    if !all_finite(&next.x) || !all_finite(&next.v) {
        return Err(Error::NonFinite {
            step: 0,
            what: format!("ODE state at t = {}", next.t),
        });
    }
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    /// Step index (scheme iteration or integrator step).
    pub n: u64,
    pub t: f64,
    pub x: Vec<f64>,
    /// Velocity; for schemes the divided difference `(x_n - x_{n-1}) / sqrt(h)`.
    pub v: Vec<f64>,
    /// `F(x) - F*`
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub mode: Mode,
    pub objective: String,
    pub alpha: f64,
    /// `h` for schemes, `dt` for the integrator.
    pub step: f64,
    /// Start time of the integrator; 0 for schemes.
    pub t0: f64,
    pub stride: u64,
    pub records: Vec<Record>,
    /// Set when the run stopped early; `records` then ends at the last good
    /// state.
    pub error: Option<String>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.x.len())
    }

    /// Physical time of step `n`, recomputed from the index.
    pub fn time_of(&self, n: u64) -> f64 {
        match self.mode {
            Mode::OdeRk4 => self.t0 + n as f64 * self.step,
            _ => n as f64 * self.step.sqrt(),
        }
    }

    /// `(t, gap)` pairs with `t > 0`.
    pub fn gap_series(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.t > 0.0)
            .map(|r| (r.t, r.gap))
            .collect()
    }

    /// `(t, |v|)` pairs with `t > 0`.
    pub fn speed_series(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .filter(|r| r.t > 0.0)
            .map(|r| (r.t, norm(&r.v)))
            .collect()
    }

    /// Writes `n,t,x_0..,v_0..,gap` rows.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let d = self.dim();
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["n".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("x_{i}")));
        header.extend((0..d).map(|i| format!("v_{i}")));
        header.push("gap".into());
        out.write_record(&header)?;
        for r in &self.records {
            let mut row = Vec::with_capacity(2 * d + 3);
            row.push(r.n.to_string());
            row.push(sig17(r.t));
            row.extend(r.x.iter().map(|v| sig17(*v)));
            row.extend(r.v.iter().map(|v| sig17(*v)));
            row.push(sig17(r.gap));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn validate_run(cfg: &ExperimentConfig, obj: &dyn Objective) -> Result<()> {
    if cfg.steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    if cfg.stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    if cfg.x0.len() != obj.dim() {
        return Err(Error::config(format!(
            "x0 has dimension {} but the objective has {}",
            cfg.x0.len(),
            obj.dim()
        )));
    }
    if cfg.mode == Mode::ProxNesterov && !obj.has_prox() {
        return Err(Error::config(format!("{} has no proximal map", obj.name())));
    }
    if !(cfg.alpha > 0.0) {
        return Err(Error::config(format!("alpha must be positive, got {}", cfg.alpha)));
    }
    Ok(())
}

/// Runs one experiment. Configuration problems are returned as errors before
/// any step is taken; a failure mid-run returns the partial trajectory with
/// [`Trajectory::error`] set.
pub fn run(cfg: &ExperimentConfig, obj: &dyn Objective) -> Result<Trajectory> {
    validate_run(cfg, obj)?;
    match cfg.mode {
        Mode::Nesterov | Mode::ProxNesterov => run_scheme(cfg, obj),
        Mode::OdeRk4 => run_ode(cfg, obj),
    }
}

fn run_scheme(cfg: &ExperimentConfig, obj: &dyn Objective) -> Result<Trajectory> {
    let step: fn(&SchemeState, &dyn Objective) -> Result<SchemeState> = match cfg.mode {
        Mode::ProxNesterov => prox_nesterov_step,
        _ => nesterov_step,
    };
    let sqrt_h = cfg.h.sqrt();
    let mut traj = Trajectory {
        mode: cfg.mode,
        objective: obj.name().to_string(),
        alpha: cfg.alpha,
        step: cfg.h,
        t0: 0.0,
        stride: cfg.stride,
        records: Vec::with_capacity((cfg.steps / cfg.stride + 2) as usize),
        error: None,
    };
    let record = |s: &SchemeState| Record {
        n: s.n,
        t: s.n as f64 * sqrt_h,
        x: s.x_curr.clone(),
        v: s.x_curr.iter().zip(&s.x_prev).map(|(a, b)| (a - b) / sqrt_h).collect(),
        gap: obj.gap(&s.x_curr),
    };
    let mut state = SchemeState::new(cfg.x0.clone(), cfg.alpha, cfg.h)?;
    traj.records.push(record(&state));
    while state.n < cfg.steps {
        match step(&state, obj) {
            Ok(next) => state = next,
            Err(e) => {
                if traj.records.last().map(|r| r.n) != Some(state.n) {
                    traj.records.push(record(&state));
                }
                traj.error = Some(e.to_string());
                return Ok(traj);
            }
        }
        if state.n % cfg.stride == 0 || state.n == cfg.steps {
            traj.records.push(record(&state));
        }
    }
    Ok(traj)
}

fn run_ode(cfg: &ExperimentConfig, obj: &dyn Objective) -> Result<Trajectory> {
    let dt = cfg.dt;
    let t0 = cfg.integrator_t0();
    let kinks = obj.kinks();
    let mut traj = Trajectory {
        mode: Mode::OdeRk4,
        objective: obj.name().to_string(),
        alpha: cfg.alpha,
        step: dt,
        t0,
        stride: cfg.stride,
        records: Vec::with_capacity((cfg.steps / cfg.stride + 2) as usize),
        error: None,
    };
    let record = |k: u64, s: &OdeState| Record {
        n: k,
        t: s.t,
        x: s.x.clone(),
        v: s.v.clone(),
        gap: obj.gap(&s.x),
    };
    let mut state = OdeState {
        t: t0,
        x: cfg.x0.clone(),
        v: vec![0.0; cfg.x0.len()],
    };
    check_ode_args(&state, cfg.alpha, dt)?;
    traj.records.push(record(0, &state));
    for k in 1..=cfg.steps {
        let mut next = rk4_with_kinks(obj, cfg.alpha, &state, dt, &kinks);
        next.t = t0 + k as f64 * dt;
        if !all_finite(&next.x) || !all_finite(&next.v) {
            if traj.records.last().map(|r| r.n) != Some(k - 1) {
                traj.records.push(record(k - 1, &state));
            }
            traj.error = Some(
                Error::NonFinite {
                    step: k,
                    what: format!("ODE state at t = {}", next.t),
                }
                .to_string(),
            );
            return Ok(traj);
        }
        state = next;
        if k % cfg.stride == 0 || k == cfg.steps {
            traj.records.push(record(k, &state));
        }
    }
    Ok(traj)
}
