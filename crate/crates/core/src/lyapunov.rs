//! Lyapunov energies along trajectories.
//!
//! With `y = x - x*` and `v = x'`:
//!
//! ```text
//! a = t gap,  b = |lambda y + t v|^2 / (2t),  c = |y|^2 / (2t)
//! E = t (a + b + xi c),  H = t^p E,  xi = lambda (lambda + 1 - alpha)
//! ```
//!
//! For `F = |x|^gamma` and the sharp parameters every term of `H'` except
//! the one in `c` cancels, leaving `H' = K1 t^p c`.

use std::io::Write;

use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::format::sig17;
use crate::linalg::{dist, dot, norm, sub};
use crate::rates::{envelope_slope, SlopeFit};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Sharp,
    Flat,
    Manual,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LyapunovParams {
    pub alpha: f64,
    pub lambda: f64,
    pub xi: f64,
    pub p: f64,
    /// `xi (p - 2 lambda)`; the coefficient of `t^p c` in `H'` under sharp
    /// parameters.
    pub k1: f64,
    pub regime: Regime,
    /// Geometry exponent the parameters were derived from.
    pub gamma: Option<f64>,
}

impl LyapunovParams {
    fn build(alpha: f64, lambda: f64, p: f64, regime: Regime, gamma: Option<f64>) -> Self {
        let xi = lambda * (lambda + 1.0 - alpha);
        LyapunovParams {
            alpha,
            lambda,
            xi,
            p,
            k1: xi * (p - 2.0 * lambda),
            regime,
            gamma,
        }
    }

    pub fn manual(alpha: f64, lambda: f64, p: f64) -> Result<Self> {
        if !(alpha > 0.0) || !lambda.is_finite() || !p.is_finite() {
            return Err(Error::invalid(format!(
                "manual parameters need alpha > 0 and finite lambda, p (got {alpha}, {lambda}, {p})"
            )));
        }
        Ok(Self::build(alpha, lambda, p, Regime::Manual, None))
    }
}

/// `4 alpha gamma / (gamma+2)^3 (1 + 2/gamma - alpha)(alpha (gamma-2) - gamma - 2)`
pub fn k1_closed_form(alpha: f64, gamma: f64) -> f64 {
    4.0 * alpha * gamma / (gamma + 2.0).powi(3)
        * (1.0 + 2.0 / gamma - alpha)
        * (alpha * (gamma - 2.0) - gamma - 2.0)
}

/// Picks `(lambda, p)` for the sharp or flat regime. Without a hint the flat
/// regime is used exactly when `gamma > 2` and `alpha >= (gamma+2)/(gamma-2)`.
pub fn select_params(alpha: f64, gamma: f64, hint: Option<Regime>) -> Result<LyapunovParams> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be at least 1, got {gamma}")));
    }
    let regime = hint.unwrap_or(if gamma > 2.0 && alpha >= (gamma + 2.0) / (gamma - 2.0) {
        Regime::Flat
    } else {
        Regime::Sharp
    });
    match regime {
        Regime::Sharp => {
            let lambda = 2.0 * alpha / (gamma + 2.0);
            let p = 2.0 * gamma * alpha / (gamma + 2.0) - 2.0;
            Ok(LyapunovParams::build(alpha, lambda, p, Regime::Sharp, Some(gamma)))
        }
        Regime::Flat => {
            if gamma <= 2.0 {
                return Err(Error::invalid(format!(
                    "flat parameters need gamma > 2, got {gamma}"
                )));
            }
            let lambda = 2.0 / (gamma - 2.0);
            let p = 4.0 / (gamma - 2.0);
            Ok(LyapunovParams::build(alpha, lambda, p, Regime::Flat, Some(gamma)))
        }
        Regime::Manual => Err(Error::invalid(
            "manual parameters need explicit lambda and p",
        )),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EnergyRecord {
    pub t: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub z: f64,
}

/// Energy quantities at one state.
pub fn energy_at(
    t: f64,
    x: &[f64],
    v: &[f64],
    gap: f64,
    params: &LyapunovParams,
    x_star: &[f64],
    rate: f64,
) -> EnergyRecord {
    let y = sub(x, x_star);
    let w: Vec<f64> = y.iter().zip(v).map(|(yi, vi)| params.lambda * yi + t * vi).collect();
    let a = t * gap;
    let b = dot(&w, &w) / (2.0 * t);
    let c = dot(&y, &y) / (2.0 * t);
    let e = t * (a + b + params.xi * c);
    EnergyRecord {
        t,
        a,
        b,
        c,
        e,
        h: t.powf(params.p) * e,
        z: gap * t.powf(rate),
    }
}

/// One record per trajectory record with `t > 0`.
pub fn energy_along(
    traj: &Trajectory,
    params: &LyapunovParams,
    x_star: &[f64],
    rate: f64,
) -> Vec<EnergyRecord> {
    traj.records
        .iter()
        .filter(|r| r.t > 0.0)
        .map(|r| energy_at(r.t, &r.x, &r.v, r.gap, params, x_star, rate))
        .collect()
}

pub fn write_energy_csv<W: Write>(records: &[EnergyRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "a", "b", "c", "E", "H", "z"])?;
    for r in records {
        out.write_record([r.t, r.a, r.b, r.c, r.e, r.h, r.z].map(sig17))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Nonincreasing,
    Nondecreasing,
}

/// Default per-comparison tolerance, relative to `max(1, |H|)`.
pub const MONOTONE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonotoneReport {
    pub direction: Direction,
    pub holds: bool,
    /// Largest step against the direction, relative to `max(1, |H|)`; zero
    /// when every step goes the right way.
    pub worst: f64,
    /// Times of the worst pair.
    pub worst_pair: Option<(f64, f64)>,
}

pub fn check_h_monotone(
    records: &[EnergyRecord],
    direction: Direction,
    tol: f64,
) -> Result<MonotoneReport> {
    if records.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: records.len(),
        });
    }
    if !(tol >= 0.0) {
        return Err(Error::invalid(format!("tolerance must be non-negative, got {tol}")));
    }
    let mut worst = 0.0;
    let mut worst_pair = None;
    for pair in records.windows(2) {
        let (h0, h1) = (pair[0].h, pair[1].h);
        let step = match direction {
            Direction::Nonincreasing => h1 - h0,
            Direction::Nondecreasing => h0 - h1,
        };
        let rel = step / 1f64.max(h0.abs()).max(h1.abs());
        if rel > worst || (rel.is_nan() && worst_pair.is_none()) {
            worst = rel;
            worst_pair = Some((pair[0].t, pair[1].t));
        }
    }
    Ok(MonotoneReport {
        direction,
        holds: worst <= tol,
        worst,
        worst_pair,
    })
}

/// First time at which `H >= t^(p+1) a / 2`, i.e. the gap term dominates
/// half of the energy.
pub fn gap_dominance_time(records: &[EnergyRecord], params: &LyapunovParams) -> Option<f64> {
    records
        .iter()
        .find(|r| r.h >= 0.5 * r.t.powf(params.p + 1.0) * r.a)
        .map(|r| r.t)
}

/// Compares a central difference of `H` with `K1 t^p c` on an integrator
/// trajectory of `|x|^gamma`.
///
/// Residuals are scaled by the local size of the closed form,
/// `|K1|/2 t^(p-1) e^(2/gamma)` with `e = gap + |v|^2/2`, the largest value
/// `|x|^2` can take on the current oscillation. A pointwise ratio would
/// blow up wherever `x` crosses the minimizer. When `K1` vanishes the
/// returned value is `max |H - H0| / |H0|`.
pub fn check_hprime_closed_form(
    traj: &Trajectory,
    params: &LyapunovParams,
    gamma: f64,
) -> Result<f64> {
    if traj.mode.is_scheme() {
        return Err(Error::Unsupported(
            "the H' identity is checked on integrator trajectories only".into(),
        ));
    }
    if params.regime != Regime::Sharp {
        return Err(Error::Unsupported(
            "the H' identity holds for sharp parameters".into(),
        ));
    }
    if params.gamma.is_some_and(|g| (g - gamma).abs() > 1e-12) {
        return Err(Error::invalid(format!(
            "parameters were built for gamma = {:?}, objective has {gamma}",
            params.gamma
        )));
    }
    let x_star = vec![0.0; traj.dim()];
    let states: Vec<_> = traj.records.iter().filter(|r| r.t > 0.0).collect();
    let recs = energy_along(traj, params, &x_star, 0.0);
    if recs.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: recs.len(),
        });
    }
    if params.k1.abs() < 1e-12 {
        let h0 = recs[0].h;
        let drift = recs.iter().map(|r| (r.h - h0).abs()).fold(0.0, f64::max);
        return Ok(if h0 == 0.0 { drift } else { drift / h0.abs() });
    }
    let mut worst = 0.0f64;
    for i in 1..recs.len() - 1 {
        let cur = &recs[i];
        let fd = (recs[i + 1].h - recs[i - 1].h) / (recs[i + 1].t - recs[i - 1].t);
        let closed = params.k1 * cur.t.powf(params.p) * cur.c;
        let speed = norm(&states[i].v);
        let energy = states[i].gap + 0.5 * speed * speed;
        let scale = 0.5 * params.k1.abs() * cur.t.powf(params.p - 1.0) * energy.powf(2.0 / gamma);
        if scale > 0.0 {
            worst = worst.max((fd - closed).abs() / scale);
        } else if fd != 0.0 || closed != 0.0 {
            worst = f64::INFINITY;
        }
    }
    Ok(worst)
}

/// Envelope slope of `|v|` against `t` over the time interval `window`.
pub fn velocity_decay_exponent(traj: &Trajectory, window: (f64, f64)) -> Result<SlopeFit> {
    let (t_lo, t_hi) = window;
    let series: Vec<(f64, f64)> = traj
        .speed_series()
        .into_iter()
        .filter(|&(t, s)| t >= t_lo && t <= t_hi && s >= 1e-300)
        .collect();
    if series.is_empty() {
        let any = traj.speed_series().iter().any(|&(t, _)| t >= t_lo && t <= t_hi);
        return Err(if any {
            Error::Degenerate("all velocities in the window are zero".into())
        } else {
            Error::InsufficientData { needed: 1, got: 0 }
        });
    }
    envelope_slope(&series, (0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PathLength {
    /// Sum of `|x_{i+1} - x_i|` over consecutive records.
    pub total: f64,
    /// Part of the total accumulated over the last decade `[T/10, T]`.
    pub last_decade: f64,
}

impl PathLength {
    pub fn last_decade_fraction(&self) -> f64 {
        if self.total > 0.0 {
            self.last_decade / self.total
        } else {
            0.0
        }
    }
}

pub fn path_length(traj: &Trajectory) -> PathLength {
    let t_end = traj.records.last().map_or(0.0, |r| r.t);
    let mut total = 0.0;
    let mut last_decade = 0.0;
    for pair in traj.records.windows(2) {
        let d = dist(&pair[1].x, &pair[0].x);
        total += d;
        if pair[0].t >= t_end / 10.0 {
            last_decade += d;
        }
    }
    PathLength { total, last_decade }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AutoLyapunov, ExperimentConfig, LyapunovChoice, Mode};
    use crate::dynamics::{run, Record};
    use crate::objective::make_power;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * 1f64.max(b.abs())
    }

    fn ode_cfg(gamma: f64, alpha: f64, t0: f64, t1: f64, dt: f64, stride: u64) -> ExperimentConfig {
        ExperimentConfig {
            objective: format!("power:gamma={gamma},dim=1"),
            alpha,
            mode: Mode::OdeRk4,
            h: 1e-5,
            dt,
            t0,
            steps: ((t1 - t0) / dt).round() as u64,
            x0: vec![0.5],
            stride,
            rate_override: None,
            lyapunov: LyapunovChoice::Auto(AutoLyapunov::AutoSharp),
            seed: 0,
            output: "out".into(),
            warnings: vec![],
        }
    }

    fn ode(gamma: f64, alpha: f64, t0: f64, t1: f64, dt: f64, stride: u64) -> Trajectory {
        let f = make_power(gamma, 1).unwrap();
        run(&ode_cfg(gamma, alpha, t0, t1, dt, stride), &f).unwrap()
    }

    #[test]
    fn select_params_examples() {
        let p = select_params(3.0, 1.0, None).unwrap();
        assert!(close(p.lambda, 2.0, 1e-15));
        assert_eq!(p.xi, 0.0);
        assert_eq!(p.k1, 0.0);

        let p = select_params(5.0, 2.0, None).unwrap();
        assert!(close(p.lambda, 2.5, 1e-15));
        assert!(close(p.xi, -3.75, 1e-15));
        assert!(close(p.k1, 7.5, 1e-14));
        assert!(close(k1_closed_form(5.0, 2.0), 7.5, 1e-14));

        let p = select_params(6.0, 3.0, Some(Regime::Flat)).unwrap();
        assert!(close(p.lambda, 2.0, 1e-15));
        assert!(close(p.p, 4.0, 1e-15));
        assert!(close(p.xi, -6.0, 1e-15));
        assert_eq!(p.regime, Regime::Flat);
    }

    #[test]
    fn auto_regime_and_rejections() {
        assert_eq!(select_params(6.0, 3.0, None).unwrap().regime, Regime::Flat);
        assert_eq!(select_params(4.0, 3.0, None).unwrap().regime, Regime::Sharp);
        assert!(select_params(6.0, 2.0, Some(Regime::Flat)).is_err());
        assert!(select_params(0.0, 2.0, None).is_err());
        assert!(select_params(1.0, 0.5, None).is_err());
        assert!(select_params(1.0, 2.0, Some(Regime::Manual)).is_err());
    }

    #[test]
    fn k1_matches_generic_form_on_a_grid() {
        for i in 0..=19 {
            for j in 0..=10 {
                let alpha = 0.5 + 0.5 * i as f64;
                let gamma = 1.0 + 0.1 * j as f64;
                let p = select_params(alpha, gamma, Some(Regime::Sharp)).unwrap();
                let cf = k1_closed_form(alpha, gamma);
                assert!((p.k1 - cf).abs() <= 1e-12 * 1f64.max(cf.abs()), "{alpha} {gamma}");
            }
        }
    }

    #[test]
    fn sign_laws_on_grid() {
        for i in 0..=38 {
            for j in 0..=20 {
                let alpha = 0.5 + 0.25 * i as f64;
                let gamma = 1.0 + 0.05 * j as f64;
                let p = select_params(alpha, gamma, Some(Regime::Sharp)).unwrap();
                let below = alpha <= 1.0 + 2.0 / gamma;
                if (alpha - (1.0 + 2.0 / gamma)).abs() < 1e-12 {
                    assert!(p.xi.abs() < 1e-12 && p.k1.abs() < 1e-12);
                    continue;
                }
                assert_eq!(p.xi >= 0.0, below, "xi at {alpha} {gamma}");
                assert_eq!(p.k1 <= 0.0, below, "K1 at {alpha} {gamma}");
            }
        }
    }

    #[test]
    fn hand_evaluated_energy() {
        let p = select_params(5.0, 2.0, None).unwrap();
        let r = energy_at(1.0, &[1.0], &[0.0], 1.0, &p, &[0.0], 0.0);
        assert!(close(r.a, 1.0, 1e-15));
        assert!(close(r.b, 3.125, 1e-15));
        assert!(close(r.c, 0.5, 1e-15));
        assert!(close(r.e, 2.25, 1e-15));

        let r = energy_at(2.0, &[0.0], &[0.0], 0.0, &p, &[0.0], 3.0);
        assert_eq!([r.a, r.b, r.c, r.e, r.h, r.z], [0.0; 6]);
    }

    #[test]
    fn energy_identities_along_a_run() {
        let traj = ode(2.0, 5.0, 0.1, 5.0, 1e-3, 7);
        let p = select_params(5.0, 2.0, None).unwrap();
        let recs = energy_along(&traj, &p, &[0.0], 4.0);
        assert_eq!(recs.len(), traj.records.len());
        for (e, r) in recs.iter().zip(&traj.records) {
            let y = r.x[0];
            let w = p.lambda * y + r.t * r.v[0];
            let direct = r.t * r.t * r.gap + 0.5 * w * w + 0.5 * p.xi * y * y;
            assert!((e.e - direct).abs() <= 1e-12 * 1f64.max(e.e.abs()));
            let dec = r.t.powf(p.p + 1.0) * (e.a + e.b + p.xi * e.c);
            assert!((e.h - dec).abs() <= 1e-12 * 1f64.max(e.h.abs()));
            assert!(e.a >= 0.0 && e.b >= 0.0 && e.c >= 0.0);
        }
    }

    #[test]
    fn monotone_on_power_runs() {
        let traj = ode(1.5, 1.0, 0.1, 20.0, 1e-4, 10);
        let p = select_params(1.0, 1.5, None).unwrap();
        let recs = energy_along(&traj, &p, &[0.0], 0.0);
        let rep = check_h_monotone(&recs, Direction::Nonincreasing, MONOTONE_TOL).unwrap();
        assert!(rep.holds, "{rep:?}");

        let traj = ode(2.0, 6.0, 0.1, 20.0, 1e-4, 10);
        let p = select_params(6.0, 2.0, None).unwrap();
        let recs = energy_along(&traj, &p, &[0.0], 0.0);
        let rep = check_h_monotone(&recs, Direction::Nondecreasing, MONOTONE_TOL).unwrap();
        assert!(rep.holds, "{rep:?}");
        let rep = check_h_monotone(&recs, Direction::Nonincreasing, MONOTONE_TOL).unwrap();
        assert!(!rep.holds);
        assert!(rep.worst_pair.is_some());
    }

    #[test]
    fn flat_energy_is_nonincreasing() {
        let traj = ode(3.0, 6.0, 0.1, 20.0, 1e-4, 10);
        let p = select_params(6.0, 3.0, None).unwrap();
        let recs = energy_along(&traj, &p, &[0.0], 0.0);
        let rep = check_h_monotone(&recs, Direction::Nonincreasing, MONOTONE_TOL).unwrap();
        assert!(rep.holds, "{rep:?}");
    }

    #[test]
    fn resting_state_is_monotone_both_ways() {
        let recs: Vec<EnergyRecord> = (1..5)
            .map(|i| EnergyRecord { t: i as f64, a: 0.0, b: 0.0, c: 0.0, e: 0.0, h: 0.0, z: 0.0 })
            .collect();
        for d in [Direction::Nonincreasing, Direction::Nondecreasing] {
            let rep = check_h_monotone(&recs, d, 0.0).unwrap();
            assert!(rep.holds);
            assert_eq!(rep.worst, 0.0);
        }
        assert!(check_h_monotone(&recs[..1], Direction::Nonincreasing, 0.0).is_err());
    }

    #[test]
    fn hprime_identity_on_quadratic() {
        let traj = ode(2.0, 5.0, 1.0, 10.0, 1e-4, 10);
        let p = select_params(5.0, 2.0, None).unwrap();
        let res = check_hprime_closed_form(&traj, &p, 2.0).unwrap();
        assert!(res <= 5e-4, "{res}");
    }

    #[test]
    fn hprime_boundary_means_constant_h() {
        // alpha = 1 + 2/gamma with gamma = 2
        let traj = ode(2.0, 2.0, 1.0, 10.0, 1e-4, 10);
        let p = select_params(2.0, 2.0, None).unwrap();
        assert_eq!(p.k1, 0.0);
        let res = check_hprime_closed_form(&traj, &p, 2.0).unwrap();
        assert!(res <= 1e-6, "{res}");
    }

    #[test]
    fn hprime_rejects_schemes_and_flat_params() {
        let f = make_power(2.0, 1).unwrap();
        let mut c = ode_cfg(2.0, 5.0, 0.1, 1.0, 1e-3, 1);
        c.mode = Mode::Nesterov;
        let traj = run(&c, &f).unwrap();
        let p = select_params(5.0, 2.0, None).unwrap();
        assert!(matches!(check_hprime_closed_form(&traj, &p, 2.0), Err(Error::Unsupported(_))));

        let traj = ode(3.0, 6.0, 1.0, 2.0, 1e-3, 1);
        let p = select_params(6.0, 3.0, None).unwrap();
        assert!(check_hprime_closed_form(&traj, &p, 3.0).is_err());
    }

    #[test]
    fn hprime_at_rest_is_zero() {
        let f = make_power(2.0, 1).unwrap();
        let mut c = ode_cfg(2.0, 5.0, 1.0, 2.0, 1e-3, 1);
        c.x0 = vec![0.0];
        let traj = run(&c, &f).unwrap();
        let p = select_params(5.0, 2.0, None).unwrap();
        assert_eq!(check_hprime_closed_form(&traj, &p, 2.0).unwrap(), 0.0);
    }

    fn synthetic(f: impl Fn(f64) -> (f64, f64)) -> Trajectory {
        let records = (0..2000)
            .map(|i| {
                let t = 10f64.powf(i as f64 / 500.0);
                let (x, v) = f(t);
                Record { n: i, t, x: vec![x], v: vec![v], gap: 0.0 }
            })
            .collect();
        Trajectory {
            mode: Mode::OdeRk4,
            objective: "synthetic".into(),
            alpha: 3.0,
            step: 1e-3,
            t0: 1.0,
            stride: 1,
            records,
            error: None,
        }
    }

    #[test]
    fn pure_damping_speed_slope() {
        let alpha = 3.0;
        let traj = synthetic(|t| (0.0, t.powf(-alpha)));
        let fit = velocity_decay_exponent(&traj, (1.0, 1e4)).unwrap();
        assert!((fit.slope + alpha).abs() < 1e-9, "{}", fit.slope);
    }

    #[test]
    fn resting_speed_is_degenerate() {
        let traj = synthetic(|_| (0.0, 0.0));
        assert!(matches!(velocity_decay_exponent(&traj, (1.0, 10.0)), Err(Error::Degenerate(_))));
        assert!(velocity_decay_exponent(&traj, (1e5, 1e6)).is_err());
    }

    #[test]
    fn path_length_of_converging_curve() {
        let traj = synthetic(|t| (1.0 / t, 0.0));
        let pl = path_length(&traj);
        assert!((pl.total - (1.0 - 10f64.powf(-1999.0 / 500.0))).abs() < 1e-12);
        assert!(pl.last_decade_fraction() < 0.01);
    }
}
