//! Benchmark objectives and sampling probes for their local geometry.
//!
//! Every catalog entry knows its optimal value, its set of minimizers and the
//! exponents `(gamma, r)` of the two geometry hypotheses it is expected to
//! satisfy:
//!
//! - flatness `H1(gamma)`: `F(x) - F* <= (1/gamma) <grad F(x), x - x*>`,
//! - growth `H2(r)`: `K d(x, X*)^r <= F(x) - F*`,
//!
//! both on a neighbourhood of the minimizers. The probes check these
//! inequalities on seeded uniform samples of a ball.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::linalg::{dist, dot, norm, sub};
use crate::{Error, Result};

/// Relative tolerance used by the geometry probes to separate an analytic
/// violation from rounding.
pub const PROBE_TOL: f64 = 1e-10;

/// Description of the minimizer set `X*`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum MinimizerSet {
    Point(Vec<f64>),
    /// One-dimensional interval `[lo, hi]`.
    Interval { lo: f64, hi: f64 },
    /// Affine set `point + ker(A)` of a rank-deficient least-squares problem.
    Affine { point: Vec<f64>, codim: usize },
}

/// Interface the dynamics and diagnostics need from an objective.
///
/// The catalog type [`ObjectiveSpec`] implements it; tests and callers may
/// plug in their own functions.
pub trait Objective: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;

    /// `argmin_z 1/2 |z - y|^2 + h F(z)`, when available in closed form.
    fn prox(&self, _h: f64, _y: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn has_prox(&self) -> bool {
        false
    }

    fn f_star(&self) -> f64;
    fn minimizer_hint(&self) -> MinimizerSet;
    fn distance_to_minset(&self, x: &[f64]) -> f64;

    /// Minimizer closest to `x`.
    fn nearest_minimizer(&self, x: &[f64]) -> Vec<f64>;

    fn nominal_gamma(&self) -> f64;
    fn nominal_r(&self) -> f64;

    /// Points where the gradient fails to be smooth. The integrator refines
    /// its sub-steps when a trajectory passes close to one of them.
    fn kinks(&self) -> Vec<Vec<f64>> {
        Vec::new()
    }

    /// `F(x) - F*`
    fn gap(&self, x: &[f64]) -> f64 {
        self.value(x) - self.f_star()
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Power { gamma: f64, dim: usize },
    Plateau { gamma: f64, a: f64 },
    LeastSquares(Box<LeastSquares>),
}

#[derive(Clone, Debug)]
struct LeastSquares {
    a: DMatrix<f64>,
    b: DVector<f64>,
    solution: DVector<f64>,
    /// Orthogonal projector onto the row space of `A`.
    row_projector: DMatrix<f64>,
    rank: usize,
    f_star: f64,
}

/// A catalog objective. Immutable after construction.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    name: String,
    kind: Kind,
}

/// `x -> |x|^gamma` extended radially to `R^dim`.
pub fn make_power(gamma: f64, dim: usize) -> Result<ObjectiveSpec> {
    if !gamma.is_finite() || gamma < 1.0 {
        return Err(Error::invalid(format!("power objective needs gamma >= 1, got {gamma}")));
    }
    if dim == 0 {
        return Err(Error::invalid("power objective needs dim >= 1"));
    }
    Ok(ObjectiveSpec {
        name: format!("power:gamma={gamma},dim={dim}"),
        kind: Kind::Power { gamma, dim },
    })
}

/// `x -> max(|x| - a, 0)^gamma` on the real line, minimized on `[-a, a]`.
pub fn make_plateau(gamma: f64, a: f64) -> Result<ObjectiveSpec> {
    if !gamma.is_finite() || gamma < 1.0 {
        return Err(Error::invalid(format!("plateau objective needs gamma >= 1, got {gamma}")));
    }
    if !a.is_finite() || a <= 0.0 {
        return Err(Error::invalid(format!("plateau objective needs a > 0, got {a}")));
    }
    Ok(ObjectiveSpec {
        name: format!("plateau:gamma={gamma},a={a}"),
        kind: Kind::Plateau { gamma, a },
    })
}

/// `x -> 1/2 |Ax - b|^2`, `A` given row-major as `rows`.
///
/// Rank-deficient matrices are accepted; the hint is the minimum-norm
/// least-squares solution.
pub fn make_least_squares(rows: &[Vec<f64>], b: &[f64]) -> Result<ObjectiveSpec> {
    make_least_squares_named(rows, b, None)
}

fn make_least_squares_named(
    rows: &[Vec<f64>],
    b: &[f64],
    source: Option<&str>,
) -> Result<ObjectiveSpec> {
    let m = rows.len();
    if m == 0 || m != b.len() {
        return Err(Error::invalid(format!(
            "least squares needs one b entry per row of A ({} rows, {} entries)",
            m,
            b.len()
        )));
    }
    let n = rows[0].len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("least squares matrix rows must share a positive length"));
    }
    let a = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
    if a.iter().any(|v| !v.is_finite()) || b.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("least squares data must be finite"));
    }
    if a.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("least squares matrix must be nonzero"));
    }
    let b = DVector::from_column_slice(b);

    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * (m.max(n) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|s| **s > eps).count();
    let pinv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::invalid(format!("pseudo-inverse failed: {e}")))?;
    let solution = &pinv * &b;
    let row_projector = &pinv * &a;
    let residual = &a * &solution - &b;
    let f_star = 0.5 * residual.norm_squared();

    let name = match source {
        Some(path) => format!("lsq:file={path}"),
        None => format!("lsq:m={m},n={n}"),
    };
    Ok(ObjectiveSpec {
        name,
        kind: Kind::LeastSquares(Box::new(LeastSquares {
            a,
            b,
            solution,
            row_projector,
            rank,
            f_star,
        })),
    })
}

/// Reads `[A|b]` from a CSV file (one row per equation, no header) and builds
/// the least-squares objective.
pub fn load_least_squares(path: impl AsRef<Path>) -> Result<ObjectiveSpec> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let mut rows = Vec::new();
    let mut b = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let values = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::config(format!("{}: not a number: {f:?}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.len() < 2 {
            return Err(Error::config(format!(
                "{}: each row needs at least one column of A plus b",
                path.display()
            )));
        }
        let (row, rhs) = values.split_at(values.len() - 1);
        rows.push(row.to_vec());
        b.push(rhs[0]);
    }
    make_least_squares_named(&rows, &b, Some(&path.display().to_string()))
}

/// Proximal map of `h |.|^gamma` on the real line.
///
/// Closed forms for `gamma = 1` (soft thresholding) and `gamma = 2`; otherwise
/// `|z|` is the root of `u + h gamma u^(gamma-1) = |y|` on `[0, |y|]`, found by
/// Newton's method safeguarded with bisection.
pub fn prox_power(gamma: f64, h: f64, y: f64) -> f64 {
    assert!(h > 0.0, "prox step must be positive, got {h}");
    assert!(gamma >= 1.0, "prox_power needs gamma >= 1, got {gamma}");
    if y == 0.0 {
        return 0.0;
    }
    let m = y.abs();
    let u = if gamma == 1.0 {
        (m - h).max(0.0)
    } else if gamma == 2.0 {
        m / (1.0 + 2.0 * h)
    } else {
        prox_power_magnitude(gamma, h, m)
    };
    u.copysign(y)
}

fn prox_power_magnitude(gamma: f64, h: f64, m: f64) -> f64 {
    let phi = |u: f64| u + h * gamma * u.powf(gamma - 1.0) - m;
    let tol = 1e-14 * m.max(1.0);
    let (mut lo, mut hi) = (0.0_f64, m);
    // phi is convex for gamma > 2, so Newton from the right end is monotone;
    // for gamma < 2 it is concave and the first step lands left of the root.
    let mut u = m;
    for _ in 0..200 {
        let r = phi(u);
        if r.abs() <= tol {
            return u;
        }
        if r > 0.0 {
            hi = u;
        } else {
            lo = u;
        }
        if hi - lo <= 2.0 * f64::EPSILON * hi {
            break;
        }
        let slope = 1.0 + h * gamma * (gamma - 1.0) * u.powf(gamma - 2.0);
        let next = u - r / slope;
        u = if next.is_finite() && next > lo && next < hi {
            next
        } else {
            0.5 * (lo + hi)
        };
    }
    // bracket collapsed: pick the endpoint with the smaller residual
    if phi(lo).abs() < phi(hi).abs() {
        lo
    } else {
        hi
    }
}

impl ObjectiveSpec {
    /// Catalog family, e.g. `"power"`.
    pub fn family(&self) -> &'static str {
        match self.kind {
            Kind::Power { .. } => "power",
            Kind::Plateau { .. } => "plateau",
            Kind::LeastSquares(_) => "lsq",
        }
    }

    /// Rank of `A` for least-squares objectives.
    pub fn rank(&self) -> Option<usize> {
        match &self.kind {
            Kind::LeastSquares(ls) => Some(ls.rank),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

fn parse_params(family: &str, body: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if body.trim().is_empty() {
        return Ok(out);
    }
    for item in body.split(',') {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::config(format!("{family}: expected key=value, got {item:?}")))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn param_f64(family: &str, key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::config(format!("{family}: {key} must be a number, got {value:?}")))
}

impl FromStr for ObjectiveSpec {
    type Err = Error;

    /// Parses `power:gamma=1.5,dim=1`, `plateau:gamma=2,a=1` or
    /// `lsq:file=problem.csv`.
    fn from_str(s: &str) -> Result<Self> {
        let (family, body) = s.split_once(':').unwrap_or((s, ""));
        let family = family.trim();
        let params = parse_params(family, body)?;
        match family {
            "power" => {
                let (mut gamma, mut dim) = (None, 1usize);
                for (k, v) in &params {
                    match k.as_str() {
                        "gamma" => gamma = Some(param_f64(family, k, v)?),
                        "dim" => {
                            dim = v.parse().map_err(|_| {
                                Error::config(format!("power: dim must be a positive integer, got {v:?}"))
                            })?
                        }
                        other => return Err(Error::config(format!("power: unknown key {other:?}"))),
                    }
                }
                let gamma = gamma.ok_or_else(|| Error::config("power: missing gamma"))?;
                make_power(gamma, dim).map_err(|e| Error::config(e.to_string()))
            }
            "plateau" => {
                let (mut gamma, mut a) = (None, None);
                for (k, v) in &params {
                    match k.as_str() {
                        "gamma" => gamma = Some(param_f64(family, k, v)?),
                        "a" => a = Some(param_f64(family, k, v)?),
                        other => return Err(Error::config(format!("plateau: unknown key {other:?}"))),
                    }
                }
                let gamma = gamma.ok_or_else(|| Error::config("plateau: missing gamma"))?;
                let a = a.ok_or_else(|| Error::config("plateau: missing a"))?;
                make_plateau(gamma, a).map_err(|e| Error::config(e.to_string()))
            }
            "lsq" => {
                let mut file = None;
                for (k, v) in &params {
                    match k.as_str() {
                        "file" => file = Some(v.clone()),
                        other => return Err(Error::config(format!("lsq: unknown key {other:?}"))),
                    }
                }
                let file = file.ok_or_else(|| Error::config("lsq: missing file"))?;
                load_least_squares(&file).map_err(|e| match e {
                    Error::Config(_) => e,
                    other => Error::config(format!("lsq: {other}")),
                })
            }
            other => Err(Error::config(format!("unknown objective family {other:?}"))),
        }
    }
}

impl Objective for ObjectiveSpec {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        match &self.kind {
            Kind::Power { dim, .. } => *dim,
            Kind::Plateau { .. } => 1,
            Kind::LeastSquares(ls) => ls.a.ncols(),
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        match &self.kind {
            Kind::Power { gamma, .. } => norm(x).powf(*gamma),
            Kind::Plateau { gamma, a } => (x[0].abs() - a).max(0.0).powf(*gamma),
            Kind::LeastSquares(ls) => {
                let r = &ls.a * DVector::from_column_slice(x) - &ls.b;
                0.5 * r.norm_squared()
            }
        }
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            Kind::Power { gamma, .. } => {
                let r = norm(x);
                if r == 0.0 {
                    return vec![0.0; x.len()];
                }
                let s = gamma * r.powf(gamma - 2.0);
                x.iter().map(|v| s * v).collect()
            }
            Kind::Plateau { gamma, a } => {
                let excess = x[0].abs() - a;
                if excess <= 0.0 {
                    return vec![0.0];
                }
                vec![(gamma * excess.powf(gamma - 1.0)).copysign(x[0])]
            }
            Kind::LeastSquares(ls) => {
                let r = &ls.a * DVector::from_column_slice(x) - &ls.b;
                (ls.a.transpose() * r).as_slice().to_vec()
            }
        }
    }

    fn prox(&self, h: f64, y: &[f64]) -> Option<Vec<f64>> {
        if h.is_nan() || h <= 0.0 {
            return None;
        }
        Some(match &self.kind {
            Kind::Power { gamma, .. } => {
                let r = norm(y);
                if r == 0.0 {
                    vec![0.0; y.len()]
                } else {
                    let s = prox_power(*gamma, h, r) / r;
                    y.iter().map(|v| s * v).collect()
                }
            }
            Kind::Plateau { gamma, a } => {
                let excess = y[0].abs() - a;
                if excess <= 0.0 {
                    vec![y[0]]
                } else {
                    vec![(a + prox_power(*gamma, h, excess)).copysign(y[0])]
                }
            }
            Kind::LeastSquares(ls) => {
                // (I + h A^T A) z = y + h A^T b
                let n = ls.a.ncols();
                let lhs = DMatrix::identity(n, n) + h * ls.a.transpose() * &ls.a;
                let rhs = DVector::from_column_slice(y) + h * ls.a.transpose() * &ls.b;
                let z = lhs.cholesky()?.solve(&rhs);
                z.as_slice().to_vec()
            }
        })
    }

    fn has_prox(&self) -> bool {
        true
    }

    fn f_star(&self) -> f64 {
        match &self.kind {
            Kind::LeastSquares(ls) => ls.f_star,
            _ => 0.0,
        }
    }

    fn minimizer_hint(&self) -> MinimizerSet {
        match &self.kind {
            Kind::Power { dim, .. } => MinimizerSet::Point(vec![0.0; *dim]),
            Kind::Plateau { a, .. } => MinimizerSet::Interval { lo: -a, hi: *a },
            Kind::LeastSquares(ls) => {
                let point = ls.solution.as_slice().to_vec();
                if ls.rank == ls.a.ncols() {
                    MinimizerSet::Point(point)
                } else {
                    MinimizerSet::Affine {
                        point,
                        codim: ls.rank,
                    }
                }
            }
        }
    }

    fn distance_to_minset(&self, x: &[f64]) -> f64 {
        match &self.kind {
            Kind::Power { .. } => norm(x),
            Kind::Plateau { a, .. } => (x[0].abs() - a).max(0.0),
            Kind::LeastSquares(ls) => {
                let d = DVector::from_column_slice(x) - &ls.solution;
                (&ls.row_projector * d).norm()
            }
        }
    }

    fn nearest_minimizer(&self, x: &[f64]) -> Vec<f64> {
        match &self.kind {
            Kind::Power { dim, .. } => vec![0.0; *dim],
            Kind::Plateau { a, .. } => vec![x[0].clamp(-a, *a)],
            Kind::LeastSquares(ls) => {
                let xv = DVector::from_column_slice(x);
                let d = &xv - &ls.solution;
                (xv - &ls.row_projector * d).as_slice().to_vec()
            }
        }
    }

    fn nominal_gamma(&self) -> f64 {
        match &self.kind {
            Kind::Power { gamma, .. } | Kind::Plateau { gamma, .. } => *gamma,
            Kind::LeastSquares(_) => 2.0,
        }
    }

    fn nominal_r(&self) -> f64 {
        match &self.kind {
            Kind::Power { gamma, .. } | Kind::Plateau { gamma, .. } => *gamma,
            Kind::LeastSquares(_) => 2.0,
        }
    }

    fn kinks(&self) -> Vec<Vec<f64>> {
        match &self.kind {
            // |x|^gamma is smooth at 0 only for even integer exponents
            Kind::Power { gamma, dim } => {
                if *gamma % 2.0 == 0.0 {
                    Vec::new()
                } else {
                    vec![vec![0.0; *dim]]
                }
            }
            Kind::Plateau { a, .. } => vec![vec![-a], vec![*a]],
            Kind::LeastSquares(_) => Vec::new(),
        }
    }
}

/// Which geometry hypothesis a probe tested.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Hypothesis {
    H1,
    H2,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ProbeVerdict {
    Holds,
    Violated { witness: Vec<f64>, margin: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryProbeReport {
    pub hypothesis: Hypothesis,
    pub exponent: f64,
    pub radius: f64,
    pub n_samples: usize,
    /// Minimum over samples of `(rhs - lhs) / max(1, |F(x) - F*|)`.
    pub worst_margin: f64,
    /// Growth constant `K`, for `H2` probes.
    pub constant: Option<f64>,
    pub verdict: ProbeVerdict,
}

impl GeometryProbeReport {
    pub fn holds(&self) -> bool {
        matches!(self.verdict, ProbeVerdict::Holds)
    }
}

/// `n` points drawn uniformly from the closed ball `B(center, radius)`.
pub fn sample_ball(center: &[f64], radius: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = center.len();
    (0..n)
        .map(|_| {
            let dir: Vec<f64> = loop {
                let g: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let len = norm(&g);
                if len > 0.0 {
                    break g.iter().map(|v| v / len).collect();
                }
            };
            let u: f64 = rng.random();
            let r = radius * u.powf(1.0 / d as f64);
            center.iter().zip(&dir).map(|(c, e)| c + r * e).collect()
        })
        .collect()
}

fn check_probe_args(obj: &dyn Objective, x_star: &[f64], radius: f64, n_samples: usize) -> Result<()> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("probe radius must be positive, got {radius}")));
    }
    if n_samples == 0 {
        return Err(Error::invalid("probe needs at least one sample"));
    }
    if x_star.len() != obj.dim() {
        return Err(Error::invalid(format!(
            "probe center has dimension {}, objective has {}",
            x_star.len(),
            obj.dim()
        )));
    }
    Ok(())
}

fn summarize(
    hypothesis: Hypothesis,
    exponent: f64,
    radius: f64,
    constant: Option<f64>,
    margins: impl Iterator<Item = (Vec<f64>, f64)>,
) -> GeometryProbeReport {
    let mut n_samples = 0;
    let mut worst: Option<(Vec<f64>, f64)> = None;
    for (x, m) in margins {
        n_samples += 1;
        if worst.as_ref().is_none_or(|(_, w)| m < *w) {
            worst = Some((x, m));
        }
    }
    let (witness, worst_margin) = worst.expect("at least one sample");
    let verdict = if worst_margin >= -PROBE_TOL {
        ProbeVerdict::Holds
    } else {
        ProbeVerdict::Violated {
            witness,
            margin: worst_margin,
        }
    };
    GeometryProbeReport {
        hypothesis,
        exponent,
        radius,
        n_samples,
        worst_margin,
        constant,
        verdict,
    }
}

/// Checks the flatness inequality `F(x) - F* <= (1/gamma) <grad F(x), x - x*>`
/// on seeded samples of `B(x*, radius)`.
pub fn probe_h1(
    obj: &dyn Objective,
    gamma: f64,
    x_star: &[f64],
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GeometryProbeReport> {
    check_probe_args(obj, x_star, radius, n_samples)?;
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("H1 exponent must be positive, got {gamma}")));
    }
    let f_star = obj.f_star();
    let margins = sample_ball(x_star, radius, n_samples, seed).into_iter().map(|x| {
        let gap = obj.value(&x) - f_star;
        let rhs = dot(&obj.gradient(&x), &sub(&x, x_star)) / gamma;
        let m = (rhs - gap) / gap.abs().max(1.0);
        (x, m)
    });
    Ok(summarize(Hypothesis::H1, gamma, radius, None, margins))
}

/// Checks the growth inequality `K d(x, X*)^r <= F(x) - F*` on seeded samples
/// of `B(x*, radius)`.
pub fn probe_h2(
    obj: &dyn Objective,
    r: f64,
    k: f64,
    x_star: &[f64],
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<GeometryProbeReport> {
    check_probe_args(obj, x_star, radius, n_samples)?;
    if !(k > 0.0) {
        return Err(Error::invalid(format!("H2 constant must be positive, got {k}")));
    }
    if !(r >= 1.0) {
        return Err(Error::invalid(format!("H2 exponent must be >= 1, got {r}")));
    }
    let f_star = obj.f_star();
    let margins = sample_ball(x_star, radius, n_samples, seed).into_iter().map(|x| {
        let gap = obj.value(&x) - f_star;
        let lhs = k * obj.distance_to_minset(&x).powf(r);
        let m = (gap - lhs) / gap.abs().max(1.0);
        (x, m)
    });
    Ok(summarize(Hypothesis::H2, r, radius, Some(k), margins))
}

/// Empirical constant `M` of the flatness upper bound
/// `F(x) - F* <= M |x - x*|^gamma` over seeded samples of the ball.
pub fn flatness_constant(
    obj: &dyn Objective,
    gamma: f64,
    x_star: &[f64],
    radius: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    check_probe_args(obj, x_star, radius, n_samples)?;
    let f_star = obj.f_star();
    Ok(sample_ball(x_star, radius, n_samples, seed)
        .iter()
        .filter_map(|x| {
            let d = dist(x, x_star);
            (d > 0.0).then(|| (obj.value(x) - f_star) / d.powf(gamma))
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LipschitzGamma {
    pub gamma: f64,
    /// Set when `K > 2L`: the pair `(K, L)` cannot come from a convex
    /// function with `L`-Lipschitz gradient and growth constant `K`.
    pub out_of_range: bool,
}

/// Flatness exponent `1 + K/(2L)` implied by quadratic growth with constant
/// `K` and an `L`-Lipschitz gradient.
pub fn gamma_from_lipschitz(k: f64, l: f64) -> Result<LipschitzGamma> {
    if !(k > 0.0) || !(l > 0.0) || !k.is_finite() || !l.is_finite() {
        return Err(Error::invalid(format!("need K > 0 and L > 0, got K={k}, L={l}")));
    }
    let gamma = 1.0 + k / (2.0 * l);
    Ok(LipschitzGamma {
        gamma,
        out_of_range: gamma > 2.0,
    })
}

/// Maximum relative error between the analytic gradient and central finite
/// differences with step `delta`.
pub fn check_gradient(obj: &dyn Objective, x: &[f64], delta: f64) -> f64 {
    let g = obj.gradient(x);
    let scale = g.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut xp = x.to_vec();
    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        xp[i] = x[i] + delta;
        let fp = obj.value(&xp);
        xp[i] = x[i] - delta;
        let fm = obj.value(&xp);
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * delta);
        worst = worst.max((fd - g[i]).abs() / scale);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn power_values_and_gradients() {
        let sq = make_power(2.0, 1).unwrap();
        assert_eq!(sq.value(&[3.0]), 9.0);
        assert_eq!(sq.gradient(&[3.0]), vec![6.0]);

        let cube = make_power(3.0, 1).unwrap();
        assert!(approx(cube.value(&[-2.0]), 8.0, 1e-12));
        assert!(approx(cube.gradient(&[-2.0])[0], -12.0, 1e-12));

        let p = make_power(1.5, 2).unwrap();
        assert_eq!(p.value(&[0.0, 0.0]), 0.0);
        assert_eq!(p.gradient(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn power_rejects_small_gamma() {
        assert!(make_power(0.5, 1).is_err());
        assert!(make_power(2.0, 0).is_err());
        assert!(make_plateau(0.9, 1.0).is_err());
        assert!(make_plateau(2.0, 0.0).is_err());
    }

    #[test]
    fn plateau_values() {
        let f = make_plateau(2.0, 1.0).unwrap();
        assert_eq!(f.value(&[3.0]), 4.0);
        assert_eq!(f.value(&[0.5]), 0.0);
        assert_eq!(f.distance_to_minset(&[3.0]), 2.0);
        assert_eq!(f.nearest_minimizer(&[-3.0]), vec![-1.0]);

        let g = make_plateau(3.0, 0.5).unwrap();
        assert!(approx(g.gradient(&[1.0])[0], 0.75, 1e-15));
    }

    #[test]
    fn least_squares_examples() {
        let f = make_least_squares(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 2.0]).unwrap();
        assert!(approx(f.f_star(), 0.0, 1e-15));
        match f.minimizer_hint() {
            MinimizerSet::Point(p) => {
                assert!(approx(p[0], 1.0, 1e-14) && approx(p[1], 2.0, 1e-14))
            }
            other => panic!("unexpected {other:?}"),
        }

        // rank deficient: second unknown is free, min-norm picks 0
        let f = make_least_squares(&[vec![1.0, 0.0], vec![0.0, 0.0]], &[1.0, 1.0]).unwrap();
        assert!(approx(f.f_star(), 0.5, 1e-14));
        let x = f.nearest_minimizer(&[0.0, 0.0]);
        assert!(approx(x[0], 1.0, 1e-14) && approx(x[1], 0.0, 1e-14));
        assert!(matches!(f.minimizer_hint(), MinimizerSet::Affine { codim: 1, .. }));
        assert!(approx(f.distance_to_minset(&[3.0, 7.0]), 2.0, 1e-13));

        let f = make_least_squares(&[vec![2.0]], &[4.0]).unwrap();
        assert!(approx(f.gradient(&[1.0])[0], -4.0, 1e-14));
    }

    #[test]
    fn least_squares_rejects_zero_matrix() {
        assert!(make_least_squares(&[vec![0.0, 0.0]], &[1.0]).is_err());
        assert!(make_least_squares(&[vec![1.0]], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn prox_power_examples() {
        assert!(approx(prox_power(1.0, 0.1, 0.5), 0.4, 1e-15));
        assert!(approx(prox_power(2.0, 0.5, 3.0), 1.5, 1e-15));
        assert!(approx(prox_power(3.0, 1.0 / 3.0, 2.0), 1.0, 1e-13));
        assert_eq!(prox_power(1.5, 0.3, 0.0), 0.0);
        assert!(approx(prox_power(3.0, 1.0 / 3.0, -2.0), -1.0, 1e-13));
    }

    #[test]
    fn prox_power_root_residual() {
        for &gamma in &[1.2, 1.5, 2.5, 3.0, 7.0] {
            for &h in &[1e-3, 0.1, 1.0, 50.0] {
                for &y in &[1e-12, 1e-6, 0.3, 1.0, 17.0, 1e5] {
                    let u = prox_power(gamma, h, y);
                    let r = u + h * gamma * u.powf(gamma - 1.0) - y;
                    assert!(
                        r.abs() <= 1e-14 * y.max(1.0) * 4.0,
                        "gamma={gamma} h={h} y={y}: residual {r}"
                    );
                    assert!((0.0..=y).contains(&u));
                }
            }
        }
    }

    #[test]
    fn radial_prox_keeps_direction() {
        let f = make_power(1.5, 2).unwrap();
        let z = f.prox(0.2, &[3.0, 4.0]).unwrap();
        let scale = prox_power(1.5, 0.2, 5.0) / 5.0;
        assert!(approx(z[0], 3.0 * scale, 1e-14) && approx(z[1], 4.0 * scale, 1e-14));
    }

    #[test]
    fn plateau_prox_inside_is_identity() {
        let f = make_plateau(2.0, 1.0).unwrap();
        assert_eq!(f.prox(0.5, &[0.3]).unwrap(), vec![0.3]);
        // outside: a + prox of the excess
        let z = f.prox(0.5, &[4.0]).unwrap();
        assert!(approx(z[0], 1.0 + 3.0 / 2.0, 1e-14));
    }

    #[test]
    fn parse_catalog_strings() {
        let f: ObjectiveSpec = "power:gamma=1.5,dim=1".parse().unwrap();
        assert_eq!(f.name(), "power:gamma=1.5,dim=1");
        assert_eq!(f.nominal_gamma(), 1.5);
        let f: ObjectiveSpec = "power:gamma=2".parse().unwrap();
        assert_eq!(f.dim(), 1);
        let f: ObjectiveSpec = "plateau:gamma=2,a=1".parse().unwrap();
        assert_eq!(f.family(), "plateau");
        assert!("power:gamma=2,beta=1".parse::<ObjectiveSpec>().is_err());
        assert!("power:dim=2".parse::<ObjectiveSpec>().is_err());
        assert!("banana:gamma=2".parse::<ObjectiveSpec>().is_err());
        assert!("power:gamma=0.5".parse::<ObjectiveSpec>().is_err());
    }

    #[test]
    fn parse_lsq_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("problem.csv");
        std::fs::write(&path, "1, 0, 1\n0, 0, 1\n").unwrap();
        let f: ObjectiveSpec = format!("lsq:file={}", path.display()).parse().unwrap();
        assert_eq!(f.dim(), 2);
        assert_eq!(f.rank(), Some(1));
        assert!(approx(f.f_star(), 0.5, 1e-14));
        assert!("lsq:file=/nonexistent/x.csv".parse::<ObjectiveSpec>().is_err());
    }

    #[test]
    fn probe_h1_examples() {
        let sq = make_power(2.0, 1).unwrap();
        let r = probe_h1(&sq, 2.0, &[0.0], 1.0, 500, 7).unwrap();
        assert!(r.holds());
        assert!(r.worst_margin.abs() < 1e-15);

        let r = probe_h1(&sq, 3.0, &[0.0], 1.0, 500, 7).unwrap();
        match r.verdict {
            ProbeVerdict::Violated { witness, .. } => assert!(witness[0] != 0.0),
            ProbeVerdict::Holds => panic!("x^2 is not H1(3)"),
        }

        let cube = make_power(3.0, 1).unwrap();
        assert!(probe_h1(&cube, 2.0, &[0.0], 1.0, 500, 7).unwrap().holds());
    }

    #[test]
    fn probe_h2_examples() {
        let sq = make_power(2.0, 1).unwrap();
        let r = probe_h2(&sq, 2.0, 1.0, &[0.0], 1.0, 500, 3).unwrap();
        assert!(r.holds());
        assert_eq!(r.worst_margin, 0.0);
        assert!(probe_h2(&sq, 3.0, 1.0, &[0.0], 1.0, 500, 3).unwrap().holds());

        let cube = make_power(3.0, 1).unwrap();
        let r = probe_h2(&cube, 2.0, 1.0, &[0.0], 1.0, 500, 3).unwrap();
        assert!(!r.holds());
        assert_eq!(r.constant, Some(1.0));
    }

    #[test]
    fn probe_argument_errors() {
        let sq = make_power(2.0, 1).unwrap();
        assert!(probe_h1(&sq, 2.0, &[0.0], 0.0, 10, 0).is_err());
        assert!(probe_h1(&sq, 2.0, &[0.0], 1.0, 0, 0).is_err());
        assert!(probe_h2(&sq, 2.0, 0.0, &[0.0], 1.0, 10, 0).is_err());
        assert!(probe_h2(&sq, 2.0, 1.0, &[0.0, 0.0], 1.0, 10, 0).is_err());
    }

    #[test]
    fn samples_are_seeded_and_inside_ball() {
        let a = sample_ball(&[1.0, -1.0, 0.5], 0.3, 200, 11);
        let b = sample_ball(&[1.0, -1.0, 0.5], 0.3, 200, 11);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| dist(x, &[1.0, -1.0, 0.5]) <= 0.3 + 1e-15));
        assert_ne!(a, sample_ball(&[1.0, -1.0, 0.5], 0.3, 200, 12));
    }

    #[test]
    fn lipschitz_gamma() {
        let g = gamma_from_lipschitz(2.0, 1.0).unwrap();
        assert_eq!(g.gamma, 2.0);
        assert!(!g.out_of_range);
        assert_eq!(gamma_from_lipschitz(1.0, 1.0).unwrap().gamma, 1.5);
        let g = gamma_from_lipschitz(4.0, 1.0).unwrap();
        assert_eq!(g.gamma, 3.0);
        assert!(g.out_of_range);
        assert!(gamma_from_lipschitz(0.0, 1.0).is_err());
        assert!(gamma_from_lipschitz(1.0, -1.0).is_err());
    }

    #[test]
    fn gradient_check_examples() {
        let sq = make_power(2.0, 1).unwrap();
        assert!(check_gradient(&sq, &[1.0], 1e-5) <= 1e-8);
        let cube = make_power(3.0, 1).unwrap();
        assert!(check_gradient(&cube, &[0.5], 1e-5) <= 1e-7);
        let ls = make_least_squares(&[vec![2.0]], &[4.0]).unwrap();
        assert!(check_gradient(&ls, &[1.0], 1e-5) <= 1e-8);
    }

    #[test]
    fn flatness_constant_of_powers() {
        // |x|^3 <= M |x|^3 with M = 1 exactly
        let cube = make_power(3.0, 1).unwrap();
        let m = flatness_constant(&cube, 3.0, &[0.0], 1.0, 200, 1).unwrap();
        assert!(approx(m, 1.0, 1e-12));
    }
}
