//! Theoretical decay exponents and their empirical counterparts.

use std::fmt;

use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::{Error, Result};

/// Which piece of the rate function applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    SharpSubcritical,
    FlatSaturated,
    FlatIntermediate,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::SharpSubcritical => "sharp-subcritical",
            Branch::FlatSaturated => "flat-saturated",
            Branch::FlatIntermediate => "flat-intermediate",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateRegime {
    pub alpha: f64,
    pub gamma: f64,
    pub branch: Branch,
    /// Decay exponent `delta` in `F(x(t)) - F* = O(t^-delta)`.
    pub exponent: f64,
}

impl RateRegime {
    /// Whether `gap * t^exponent` is known to stay bounded.
    pub fn upper_bound_proven(&self) -> bool {
        self.branch != Branch::FlatIntermediate
    }

    /// Whether `gap * t^exponent` is known not to vanish along some
    /// trajectory. On the sharp branch with `gamma > 2` only the upper bound
    /// is known.
    pub fn lower_bound_proven(&self) -> bool {
        !(self.branch == Branch::SharpSubcritical && self.gamma > 2.0)
    }

    /// Same regime with the exponent replaced, e.g. by a configured override.
    pub fn with_exponent(self, exponent: f64) -> Self {
        RateRegime { exponent, ..self }
    }
}

/// The piecewise rate function. Boundaries go to the sharp branch
/// (`alpha <= 1 + 2/gamma`) and to the saturated branch
/// (`alpha >= (gamma+2)/(gamma-2)`); the expressions agree there.
pub fn theoretical_rate(alpha: f64, gamma: f64) -> Result<RateRegime> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be at least 1, got {gamma}")));
    }
    let sharp = 2.0 * alpha * gamma / (gamma + 2.0);
    let (branch, exponent) = if gamma <= 2.0 || alpha <= 1.0 + 2.0 / gamma {
        (Branch::SharpSubcritical, sharp)
    } else if alpha >= (gamma + 2.0) / (gamma - 2.0) {
        (Branch::FlatSaturated, 2.0 * gamma / (gamma - 2.0))
    } else {
        (Branch::FlatIntermediate, sharp)
    };
    Ok(RateRegime {
        alpha,
        gamma,
        branch,
        exponent,
    })
}

/// Default fitting window: the last half of the log-time span.
pub const TAIL_WINDOW: (f64, f64) = (0.5, 1.0);
/// Number of log-spaced envelope bins.
pub const ENVELOPE_BINS: usize = 32;
/// Fits need at least this many positive samples in the window.
pub const MIN_FIT_RECORDS: usize = 10;

/// Log-log slope of an envelope.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    /// Regression standard error of the slope.
    pub stderr: f64,
    /// Time interval the window resolved to.
    pub window: (f64, f64),
    /// Envelope points `(t, value)` the regression used.
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExponentFit {
    /// Decay exponent, i.e. minus the envelope slope.
    pub exponent: f64,
    pub stderr: f64,
    pub window: (f64, f64),
    pub points: usize,
}

/// Resolves a fraction pair of the log-time span of `series` to times.
pub fn resolve_window(series: &[(f64, f64)], window: (f64, f64)) -> Result<(f64, f64)> {
    let (lo, hi) = window;
    if !(0.0..1.0).contains(&lo) || !(hi > lo && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "window fractions must satisfy 0 <= lo < hi <= 1, got ({lo}, {hi})"
        )));
    }
    let mut ts = series.iter().map(|p| p.0).filter(|t| *t > 0.0);
    let first = ts.next().ok_or(Error::InsufficientData { needed: 2, got: 0 })?;
    let last = ts.next_back().unwrap_or(first);
    let (l0, l1) = (first.ln(), last.ln());
    let at = |f: f64| {
        if f == 0.0 {
            first
        } else if f == 1.0 {
            last
        } else {
            (l0 + f * (l1 - l0)).exp()
        }
    };
    Ok((at(lo), at(hi)))
}

/// Interior local maxima of the sequence. The endpoints are left out: on a
/// steep decay the first point of a window beats every later peak.
fn peaks(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points
        .windows(3)
        .filter(|w| w[1].1 >= w[0].1 && w[1].1 >= w[2].1)
        .map(|w| w[1])
        .collect()
}

/// Upper envelope of an oscillating positive sequence: at each of the
/// log-spaced bin edges, the largest local maximum at or after the edge,
/// placed at the time it occurs. Falls back to per-bin maxima of all points
/// when this gives fewer than three points, e.g. for monotone sequences.
fn envelope(all: &[(f64, f64)], t_lo: f64, t_hi: f64) -> Vec<(f64, f64)> {
    let peaks = peaks(all);
    let points = &peaks[..];
    let n = points.len();
    let ratio = t_hi / t_lo;
    let edges: Vec<f64> = (0..ENVELOPE_BINS)
        .map(|k| t_lo * ratio.powf(k as f64 / ENVELOPE_BINS as f64))
        .collect();
    let mut picked: Vec<usize> = Vec::new();
    if n > 0 {
        // suffix argmax; ties keep the earliest index
        let mut arg = vec![0usize; n];
        let mut best = n - 1;
        for i in (0..n).rev() {
            if points[i].1 >= points[best].1 {
                best = i;
            }
            arg[i] = best;
        }
        for &e in &edges {
            let start = points.partition_point(|p| p.0 < e);
            if start < n {
                let i = arg[start];
                if points[i].1 > 0.0 && picked.last() != Some(&i) {
                    picked.push(i);
                }
            }
        }
    }
    picked.dedup();
    if picked.len() >= 3 {
        return picked.into_iter().map(|i| points[i]).collect();
    }
    let mut out = Vec::new();
    for k in 0..ENVELOPE_BINS {
        let a = edges[k];
        let b = edges.get(k + 1).copied().unwrap_or(f64::INFINITY);
        let m = all
            .iter()
            .filter(|p| p.0 >= a && p.0 < b && p.1 > 0.0)
            .max_by(|p, q| p.1.total_cmp(&q.1));
        if let Some(p) = m {
            out.push(*p);
        }
    }
    out
}

fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let stderr = if xs.len() > 2 {
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, stderr, ssr)
}

fn window_points(series: &[(f64, f64)], window: (f64, f64)) -> Result<(Vec<(f64, f64)>, (f64, f64))> {
    let (t_lo, t_hi) = resolve_window(series, window)?;
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|p| p.0 > 0.0 && p.0 >= t_lo && p.0 <= t_hi && p.1.is_finite())
        .collect();
    if !pts.is_empty() && pts.iter().all(|p| p.1 == 0.0) {
        return Err(Error::Degenerate("all values in the window are zero".into()));
    }
    let usable = pts.iter().filter(|p| p.1 > 0.0).count();
    if usable < MIN_FIT_RECORDS {
        return Err(Error::InsufficientData {
            needed: MIN_FIT_RECORDS,
            got: usable,
        });
    }
    Ok((pts, (t_lo, t_hi)))
}

/// Least-squares slope of `log(envelope)` against `log t` over a window
/// given as fractions of the log-time span.
pub fn envelope_slope(series: &[(f64, f64)], window: (f64, f64)) -> Result<SlopeFit> {
    let (pts, (t_lo, t_hi)) = window_points(series, window)?;
    let env = envelope(&pts, t_lo, t_hi);
    if env.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: env.len(),
        });
    }
    let xs: Vec<f64> = env.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = env.iter().map(|p| p.1.ln()).collect();
    let (slope, stderr, _) = ols(&xs, &ys);
    Ok(SlopeFit {
        slope,
        stderr,
        window: (t_lo, t_hi),
        points: env,
    })
}

/// Decay exponent of a `(t, gap)` series.
pub fn fit_decay_exponent(series: &[(f64, f64)], window: (f64, f64)) -> Result<ExponentFit> {
    let fit = envelope_slope(series, window)?;
    // -0.0 reads badly in reports
    let exponent = if fit.slope == 0.0 { 0.0 } else { -fit.slope };
    Ok(ExponentFit {
        exponent,
        stderr: fit.stderr,
        window: fit.window,
        points: fit.points.len(),
    })
}

/// Decay exponent of the optimality gap along a trajectory.
pub fn fit_exponent(traj: &Trajectory, window: (f64, f64)) -> Result<ExponentFit> {
    fit_decay_exponent(&traj.gap_series(), window)
}

/// Root-mean-square residuals of two models for the envelope of a series:
/// a power law (`log v` linear in `log t`) and an exponential (`log v`
/// linear in `t`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailModels {
    pub power_rms: f64,
    pub exponential_rms: f64,
}

impl TailModels {
    /// How much worse the exponential model fits.
    pub fn ratio(&self) -> f64 {
        self.exponential_rms / self.power_rms
    }
}

pub fn compare_tail_models(series: &[(f64, f64)], window: (f64, f64)) -> Result<TailModels> {
    let fit = envelope_slope(series, window)?;
    let n = fit.points.len() as f64;
    let ys: Vec<f64> = fit.points.iter().map(|p| p.1.ln()).collect();
    let log_t: Vec<f64> = fit.points.iter().map(|p| p.0.ln()).collect();
    let t: Vec<f64> = fit.points.iter().map(|p| p.0).collect();
    let (_, _, ssr_pow) = ols(&log_t, &ys);
    let (_, _, ssr_exp) = ols(&t, &ys);
    Ok(TailModels {
        power_rms: (ssr_pow / n).sqrt(),
        exponential_rms: (ssr_exp / n).sqrt(),
    })
}

/// `z = gap * t^exponent`, rescaled so that its maximum is 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ZSequence {
    pub points: Vec<(f64, f64)>,
    /// Maximum before rescaling.
    pub raw_max: f64,
}

impl ZSequence {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t", "z"])?;
        for (t, z) in &self.points {
            out.write_record([crate::format::sig17(*t), crate::format::sig17(*z)])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub fn z_from_series(series: &[(f64, f64)], exponent: f64) -> Result<ZSequence> {
    if !exponent.is_finite() {
        return Err(Error::invalid(format!("exponent must be finite, got {exponent}")));
    }
    let raw: Vec<(f64, f64)> = series
        .iter()
        .filter(|p| p.0 > 0.0)
        .map(|&(t, g)| (t, g * t.powf(exponent)))
        .collect();
    let raw_max = raw.iter().map(|p| p.1).fold(0.0, f64::max);
    if !(raw_max > 0.0) || !raw_max.is_finite() {
        return Err(Error::Degenerate("z sequence has no positive finite maximum".into()));
    }
    Ok(ZSequence {
        points: raw.into_iter().map(|(t, z)| (t, z / raw_max)).collect(),
        raw_max,
    })
}

pub fn z_sequence(traj: &Trajectory, exponent: f64) -> Result<ZSequence> {
    z_from_series(&traj.gap_series(), exponent)
}

/// Pass thresholds for the `z` statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ZThresholds {
    /// Tail maximum over global maximum must reach this.
    pub nonvanishing: f64,
    /// Tail maximum may exceed the earlier maximum by this factor.
    pub bounded_slack: f64,
    pub window: (f64, f64),
}

impl Default for ZThresholds {
    fn default() -> Self {
        ZThresholds {
            nonvanishing: 0.05,
            bounded_slack: 1.05,
            window: TAIL_WINDOW,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ZStats {
    pub global_max: f64,
    /// Maximum of normalized `z` over the tail window.
    pub tail_max: f64,
    /// Maximum of normalized `z` before the tail window.
    pub head_max: f64,
    pub tail_ratio: f64,
}

pub fn z_stats(z: &ZSequence, window: (f64, f64)) -> Result<ZStats> {
    let (t_lo, t_hi) = resolve_window(&z.points, window)?;
    let mut tail_max = 0.0f64;
    let mut head_max = 0.0f64;
    for &(t, v) in &z.points {
        if t >= t_lo && t <= t_hi {
            tail_max = tail_max.max(v);
        } else if t < t_lo {
            head_max = head_max.max(v);
        }
    }
    Ok(ZStats {
        global_max: z.raw_max,
        tail_max,
        head_max,
        tail_ratio: tail_max,
    })
}

fn is_proven(b: &bool) -> bool {
    *b
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateVerdict {
    pub objective: String,
    pub alpha: f64,
    pub gamma: f64,
    pub branch: Branch,
    pub theoretical: f64,
    pub fitted: f64,
    pub fitted_err: f64,
    pub z_global_max: f64,
    pub z_tail_ratio: f64,
    pub boundedness: bool,
    pub nonvanishing: bool,
    #[serde(skip_serializing_if = "is_proven", serialize_with = "unproven")]
    pub upper_bound_proven: bool,
    #[serde(skip_serializing_if = "is_proven", serialize_with = "unproven")]
    pub optimality_proven: bool,
    pub window: (f64, f64),
}

fn unproven<S: serde::Serializer>(_: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str("unproven")
}

impl RateVerdict {
    pub fn asserts_boundedness(&self) -> bool {
        self.upper_bound_proven
    }

    pub fn asserts_nonvanishing(&self) -> bool {
        self.optimality_proven
    }

    /// True when every asserted test passes.
    pub fn passed(&self) -> bool {
        (!self.asserts_boundedness() || self.boundedness)
            && (!self.asserts_nonvanishing() || self.nonvanishing)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)?;
        if let Some(map) = v.as_object_mut() {
            // rename the proof flags to their report names
            if let Some(x) = map.remove("upper_bound_proven") {
                map.insert("upper_bound".into(), x);
            }
            if let Some(x) = map.remove("optimality_proven") {
                map.insert("optimality".into(), x);
            }
            map.insert("passed".into(), self.passed().into());
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }
}

/// Combines the exponent fit and the `z` statistics of a trajectory.
pub fn verify_rate(traj: &Trajectory, regime: &RateRegime) -> Result<RateVerdict> {
    verify_series(&traj.objective, &traj.gap_series(), regime, &ZThresholds::default())
}

pub fn verify_series(
    objective: &str,
    series: &[(f64, f64)],
    regime: &RateRegime,
    thresholds: &ZThresholds,
) -> Result<RateVerdict> {
    let (t_lo, t_hi) = resolve_window(series, thresholds.window)?;
    if t_hi < 10.0 * t_lo * (1.0 - 1e-12) {
        return Err(Error::InsufficientData {
            needed: 10,
            got: (t_hi / t_lo).floor() as usize,
        });
    }
    let fit = fit_decay_exponent(series, thresholds.window)?;
    let z = z_from_series(series, regime.exponent)?;
    let stats = z_stats(&z, thresholds.window)?;
    Ok(RateVerdict {
        objective: objective.to_string(),
        alpha: regime.alpha,
        gamma: regime.gamma,
        branch: regime.branch,
        theoretical: regime.exponent,
        fitted: fit.exponent,
        fitted_err: fit.stderr,
        z_global_max: stats.global_max,
        z_tail_ratio: stats.tail_ratio,
        boundedness: stats.tail_max <= thresholds.bounded_slack * stats.head_max,
        nonvanishing: stats.tail_ratio >= thresholds.nonvanishing,
        upper_bound_proven: regime.upper_bound_proven(),
        optimality_proven: regime.lower_bound_proven(),
        window: (t_lo, t_hi),
    })
}
