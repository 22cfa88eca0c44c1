//! Controls, germs, dyadic sewing with error certificates, and the
//! nonlinear Young solver `psi_{k+1} = psi_k + int_{t_k}^{t_{k+1}} b(r, W_r + psi_k) dr`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::averaging::fmt;
use crate::error::{Error, Result};
use crate::fields::DriftField;
use crate::paths::BrownianPath;

/// Factor by which empirical coherence may exceed the declared bound before the
/// certificate is withdrawn.
pub const COHERENCE_SLACK: f64 = 10.0;

/// A superadditive `w(s, t) >= 0` on the time simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlFunction {
    /// `scale * (t - s)^exponent`, exponent >= 1.
    Power { scale: f64, exponent: f64 },
    /// Additive control from a running total, linear between the given times.
    Variation { times: Vec<f64>, cumulative: Vec<f64> },
    /// `sum_i weights_i * w_i(s, t)`.
    Sum { weights: Vec<f64>, terms: Vec<ControlFunction> },
    /// `w(s, t)^exponent`, exponent >= 1.
    Raised { exponent: f64, inner: Box<ControlFunction> },
}

impl ControlFunction {
    pub fn power(scale: f64, exponent: f64) -> Result<Self> {
        if !(scale >= 0.0 && exponent >= 1.0) {
            return Err(Error::Parameter(format!(
                "power control needs scale >= 0 and exponent >= 1, got {scale}, {exponent}"
            )));
        }
        Ok(Self::Power { scale, exponent })
    }

    /// `t - s`.
    pub fn length() -> Self {
        Self::Power {
            scale: 1.0,
            exponent: 1.0,
        }
    }

    pub fn sum(weights: Vec<f64>, terms: Vec<ControlFunction>) -> Result<Self> {
        if weights.len() != terms.len() || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Parameter("control sums need one nonnegative weight per term".into()));
        }
        Ok(Self::Sum { weights, terms })
    }

    pub fn raised(self, exponent: f64) -> Result<Self> {
        if !(exponent >= 1.0) {
            return Err(Error::Parameter(format!("control powers need exponent >= 1, got {exponent}")));
        }
        Ok(Self::Raised {
            exponent,
            inner: Box::new(self),
        })
    }

    pub fn eval(&self, s: f64, t: f64) -> f64 {
        if t <= s {
            return 0.0;
        }
        match self {
            Self::Power { scale, exponent } => scale * (t - s).powf(*exponent),
            Self::Variation { times, cumulative } => {
                (interp(times, cumulative, t) - interp(times, cumulative, s)).max(0.0)
            }
            Self::Sum { weights, terms } => weights.iter().zip(terms).map(|(w, c)| w * c.eval(s, t)).sum(),
            Self::Raised { exponent, inner } => inner.eval(s, t).powf(*exponent),
        }
    }
}

fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let n = xs.len();
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let k = xs.partition_point(|&v| v <= x) - 1;
    let lam = (x - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + lam * (ys[k + 1] - ys[k])
}

/// Grid variation of `values` (row-major, `dim` columns) as an additive control.
pub fn variation_control(times: &[f64], values: &[f64], dim: usize) -> Result<ControlFunction> {
    if dim == 0 || values.len() != times.len() * dim || times.is_empty() {
        return Err(Error::Parameter("variation control needs one row of values per time".into()));
    }
    let mut cumulative = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for k in 1..times.len() {
        let step: f64 = (0..dim)
            .map(|c| (values[k * dim + c] - values[(k - 1) * dim + c]).powi(2))
            .sum::<f64>()
            .sqrt();
        acc += step;
        cumulative.push(acc);
    }
    Ok(ControlFunction::Variation {
        times: times.to_vec(),
        cumulative,
    })
}

/// Declared coherence `|delta A_{s,u,t}| <= constant * w(s, t)^theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coherence {
    pub constant: f64,
    pub theta: f64,
}

/// A two-parameter germ `A(s, t)` with its declared coherence.
pub struct Germ<'a> {
    eval: Box<dyn Fn(f64, f64) -> Vec<f64> + Sync + 'a>,
    pub dim: usize,
    pub coherence: Coherence,
    pub control: ControlFunction,
}

impl<'a> Germ<'a> {
    pub fn new<F>(dim: usize, coherence: Coherence, control: ControlFunction, eval: F) -> Self
    where
        F: Fn(f64, f64) -> Vec<f64> + Sync + 'a,
    {
        Self {
            eval: Box::new(eval),
            dim,
            coherence,
            control,
        }
    }

    pub fn eval(&self, s: f64, t: f64) -> Vec<f64> {
        (self.eval)(s, t)
    }

    /// `delta A_{s,u,t} = A(s,t) - A(s,u) - A(u,t)`.
    pub fn defect(&self, s: f64, u: f64, t: f64) -> Vec<f64> {
        let a = self.eval(s, t);
        let b = self.eval(s, u);
        let c = self.eval(u, t);
        a.iter().zip(&b).zip(&c).map(|((a, b), c)| a - b - c).collect()
    }
}

/// Sewing constant `2^theta / (2^theta - 2)`.
pub fn sewing_constant(theta: f64) -> f64 {
    let p = 2f64.powf(theta);
    p / (p - 2.0)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Error bounds attached to one sewn increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalCertificate {
    pub s: f64,
    pub t: f64,
    /// `|I(s,t) - A(s,t)| <= C(theta) Gamma w(s,t)^theta` for the exact limit.
    pub germ_bound: f64,
    /// Bound on the distance between the returned Riemann sum and the limit.
    pub truncation_bound: f64,
    /// Floating-point allowance for the summation.
    pub rounding: f64,
}

impl IntervalCertificate {
    pub fn total(&self) -> f64 {
        self.truncation_bound + self.rounding
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SewingCertificate {
    pub sewing_constant: f64,
    pub coherence: Coherence,
    /// Ratio of consecutive truncation terms used for the tail.
    pub tail_ratio: f64,
    /// Whether the tail ratio is exact for the control or extrapolated.
    pub tail_exact: bool,
    pub intervals: Vec<IntervalCertificate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SewResult {
    pub start: f64,
    pub end: f64,
    pub level: u32,
    pub dim: usize,
    /// Running sums at the `2^level + 1` grid points, row-major.
    pub cumulative: Vec<f64>,
    /// Largest `|delta A| / (Gamma w^theta)` over the checked dyadic triples.
    pub max_coherence_ratio: f64,
    pub triples_checked: usize,
    /// `None` when the empirical coherence exceeded the declared one by more than the slack.
    pub certificate: Option<SewingCertificate>,
    pub flags: Vec<String>,
}

impl SewResult {
    pub fn time(&self, k: usize) -> f64 {
        self.start + (self.end - self.start) * k as f64 / (1usize << self.level) as f64
    }

    /// Sewn increment between grid indices `a <= b`.
    pub fn increment(&self, a: usize, b: usize) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|c| self.cumulative[b * d + c] - self.cumulative[a * d + c])
            .collect()
    }

    pub fn total(&self) -> Vec<f64> {
        self.increment(0, 1usize << self.level)
    }
}

/// Cap on the target sewing level.
pub const MAX_SEW_LEVEL: u32 = 26;

/// Sew `germ` over `[start, end]` by summing it over the dyadic partition of
/// `level`, checking coherence on every coarser dyadic triple, and certifying the
/// dyadic intervals of the first `certified_levels` levels.
pub fn sew(germ: &Germ<'_>, start: f64, end: f64, level: u32, certified_levels: u32) -> Result<SewResult> {
    let Coherence { constant, theta } = germ.coherence;
    if !(theta > 1.0) {
        return Err(Error::Precondition(format!("sewing needs theta > 1, got {theta}")));
    }
    if !(end > start) {
        return Err(Error::Parameter(format!("need start < end, got [{start}, {end}]")));
    }
    if level > MAX_SEW_LEVEL {
        return Err(Error::Resource {
            what: "sewing grid intervals",
            requested: 1u128 << level,
            cap: 1u128 << MAX_SEW_LEVEL,
        });
    }
    let n = 1usize << level;
    let d = germ.dim;
    let time = |k: usize| start + (end - start) * k as f64 / n as f64;

    // finest increments and their running sums
    let mut cumulative = vec![0.0; (n + 1) * d];
    let mut abs_cumulative = vec![0.0; n + 1];
    let mut finest = Vec::with_capacity(n * d);
    for k in 0..n {
        let a = germ.eval(time(k), time(k + 1));
        if a.len() != d || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Evaluation {
                field: "germ".into(),
                t: time(k),
                x: a,
            });
        }
        for c in 0..d {
            cumulative[(k + 1) * d + c] = cumulative[k * d + c] + a[c];
        }
        abs_cumulative[k + 1] = abs_cumulative[k] + norm(&a);
        finest.extend(a);
    }

    // coherence on all dyadic triples above the finest level
    let mut max_ratio = 0.0f64;
    let mut triples = 0usize;
    let mut values = finest;
    let mut width = 1usize;
    while width < n {
        let mut next = Vec::with_capacity(values.len() / 2);
        for j in 0..n / (2 * width) {
            let (a, b) = (j * 2 * width, (j + 1) * 2 * width);
            let whole = germ.eval(time(a), time(b));
            let left = &values[2 * j * d..(2 * j + 1) * d];
            let right = &values[(2 * j + 1) * d..(2 * j + 2) * d];
            let defect: Vec<f64> = (0..d).map(|c| whole[c] - left[c] - right[c]).collect();
            let bound = constant * germ.control.eval(time(a), time(b)).powf(theta);
            let dn = norm(&defect);
            let ratio = if bound > 0.0 {
                dn / bound
            } else if dn > 1e-12 * norm(&whole).max(1.0) {
                f64::INFINITY
            } else {
                0.0
            };
            max_ratio = max_ratio.max(ratio);
            triples += 1;
            next.extend(whole);
        }
        values = next;
        width *= 2;
    }

    let mut flags = Vec::new();
    let certificate = if max_ratio > COHERENCE_SLACK {
        flags.push(format!(
            "empirical coherence exceeds the declared bound by {max_ratio:.3e}; certificate withdrawn"
        ));
        None
    } else {
        let (tail_ratio, tail_exact) = tail_ratio(&germ.control, theta, start, end, level);
        if tail_ratio >= 1.0 {
            flags.push(format!("truncation terms do not decay (ratio {tail_ratio:.3})"));
        }
        let c_theta = sewing_constant(theta);
        let mut intervals = Vec::new();
        for j in 0..=certified_levels.min(level) {
            let len = 1usize << (level - j);
            for m in 0..(1usize << j) {
                let (a, b) = (m * len, (m + 1) * len);
                let (s, t) = (time(a), time(b));
                // level-`level` terms inside [s, t]
                let first: f64 = (a..b)
                    .map(|k| constant * germ.control.eval(time(k), time(k + 1)).powf(theta))
                    .sum();
                let truncation_bound = if tail_ratio < 1.0 {
                    first / (1.0 - tail_ratio)
                } else {
                    f64::INFINITY
                };
                let scale = abs_cumulative[b] - abs_cumulative[a];
                intervals.push(IntervalCertificate {
                    s,
                    t,
                    germ_bound: c_theta * constant * germ.control.eval(s, t).powf(theta),
                    truncation_bound,
                    rounding: 4.0 * f64::EPSILON * ((b - a) as f64 + 1.0) * scale,
                });
            }
        }
        Some(SewingCertificate {
            sewing_constant: c_theta,
            coherence: germ.coherence,
            tail_ratio,
            tail_exact,
            intervals,
        })
    };
    Ok(SewResult {
        start,
        end,
        level,
        dim: d,
        cumulative,
        max_coherence_ratio: max_ratio,
        triples_checked: triples,
        certificate,
        flags,
    })
}

/// Ratio between successive dyadic truncation sums `sum_I w(I)^theta`.
fn tail_ratio(control: &ControlFunction, theta: f64, start: f64, end: f64, level: u32) -> (f64, bool) {
    if let ControlFunction::Power { exponent, .. } = control {
        return (2f64.powf(1.0 - exponent * theta), true);
    }
    // extrapolate from the two finest levels
    let sum_at = |lvl: u32| -> f64 {
        let n = 1usize << lvl;
        (0..n)
            .map(|k| {
                let s = start + (end - start) * k as f64 / n as f64;
                let t = start + (end - start) * (k + 1) as f64 / n as f64;
                control.eval(s, t).powf(theta)
            })
            .sum()
    };
    if level == 0 {
        return (2f64.powf(1.0 - theta), false);
    }
    let fine = sum_at(level);
    let coarse = sum_at(level - 1);
    let r = if coarse > 0.0 { fine / coarse } else { 0.0 };
    (r.max(2f64.powf(1.0 - theta)), false)
}

/// Which scheme produced a [`SolutionPath`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    NonlinearYoung,
    EulerMaruyama,
}

impl Scheme {
    pub fn tag(self) -> &'static str {
        match self {
            Scheme::NonlinearYoung => "nonlinear-young",
            Scheme::EulerMaruyama => "euler-maruyama",
        }
    }
}

/// Solution `Y` of `Y_t = Y_s + int_s^t b(r, Y_r) dr + W_t - W_s` on a dyadic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub scheme: Scheme,
    pub level: u32,
    pub dim: usize,
    pub times: Vec<f64>,
    /// Row-major `Y_k`.
    pub values: Vec<f64>,
    /// Row-major `psi_k = Y_k - W_{t_k}`.
    pub drift_part: Vec<f64>,
    /// Row-major drift integral over the step ending at `t_k` (zero in the first row).
    pub drift_steps: Vec<f64>,
    /// First time `psi` left the configured box, if it did.
    pub escape_time: Option<f64>,
}

impl SolutionPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn scalar(&self, k: usize) -> f64 {
        self.values[k * self.dim]
    }

    pub fn drift_part_at(&self, k: usize) -> &[f64] {
        &self.drift_part[k * self.dim..(k + 1) * self.dim]
    }

    /// Variation of the drift part as a control.
    pub fn drift_variation(&self) -> ControlFunction {
        variation_control(&self.times, &self.drift_part, self.dim).expect("rows match times")
    }

    /// Largest coordinate distance to another solution on the same grid.
    pub fn sup_distance(&self, other: &SolutionPath) -> Result<f64> {
        if self.times != other.times || self.dim != other.dim {
            return Err(Error::Incompatible("solutions live on different grids".into()));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// CSV with columns `t, y.., psi.., drift..`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim;
        let mut header = vec!["t".to_string()];
        for name in ["y", "psi", "drift"] {
            header.extend((1..=d).map(|c| format!("{name}{c}")));
        }
        writeln!(w, "# scheme={},level={}", self.scheme.tag(), self.level)?;
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt(self.times[k])];
            for arr in [&self.values, &self.drift_part, &self.drift_steps] {
                row.extend(arr[k * d..(k + 1) * d].iter().map(|v| fmt(*v)));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn check_level(path: &BrownianPath, level: u32) -> Result<usize> {
    if level > path.level() {
        return Err(Error::Parameter(format!(
            "solver level {level} exceeds path level {}",
            path.level()
        )));
    }
    Ok(1usize << (path.level() - level))
}

/// Nonlinear Young scheme from `Y_0 = x0`; see [`solve_nonlinear_young_from`].
pub fn solve_nonlinear_young(
    b: &DriftField,
    path: &BrownianPath,
    x0: &[f64],
    level: u32,
    radius: Option<f64>,
) -> Result<SolutionPath> {
    solve_nonlinear_young_from(b, path, 0, x0, level, radius)
}

/// Nonlinear Young scheme started at outer grid index `start` with `Y = x`.
///
/// Each outer step freezes `psi` at its left endpoint and integrates
/// `b(r, W_r + psi)` with the trapezoid rule at full path resolution. If `radius`
/// is given, the first time `psi` leaves `[-radius, radius]^d` is recorded.
pub fn solve_nonlinear_young_from(
    b: &DriftField,
    path: &BrownianPath,
    start: usize,
    x: &[f64],
    level: u32,
    radius: Option<f64>,
) -> Result<SolutionPath> {
    let stride = check_level(path, level)?;
    let d = path.dim();
    if x.len() != d || b.dim != d {
        return Err(Error::Incompatible(format!(
            "drift dim {}, path dim {d}, initial point dim {}",
            b.dim,
            x.len()
        )));
    }
    let n = 1usize << level;
    if start > n {
        return Err(Error::Domain(format!("start index {start} beyond grid of {n} steps")));
    }
    let grid = path.grid();
    let h = grid.step();
    let rows = n - start + 1;
    let mut times = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(rows * d);
    let mut drift_part = Vec::with_capacity(rows * d);
    let mut drift_steps = Vec::with_capacity(rows * d);
    let mut psi: Vec<f64> = (0..d).map(|c| x[c] - path.point(start * stride)[c]).collect();
    let mut escape_time = None;
    let mut point = vec![0.0; d];
    let mut value = vec![0.0; d];
    let mut step = vec![0.0; d];
    for k in start..=n {
        let kk = k * stride;
        let t = grid.time(kk);
        if k > start {
            // psi frozen at the left endpoint of [t_{k-1}, t_k]
            let i0 = (k - 1) * stride;
            if d == 1 {
                let p = psi[0];
                let mut s = 0.5 * (b.eval1(grid.time(i0), path.scalar(i0) + p) + b.eval1(t, path.scalar(kk) + p));
                for m in i0 + 1..kk {
                    s += b.eval1(grid.time(m), path.scalar(m) + p);
                }
                step[0] = s * h;
            } else {
                step.iter_mut().for_each(|v| *v = 0.0);
                for m in i0..=kk {
                    let w = if m == i0 || m == kk { 0.5 } else { 1.0 };
                    for c in 0..d {
                        point[c] = path.point(m)[c] + psi[c];
                    }
                    b.eval_into(grid.time(m), &point, &mut value);
                    step.iter_mut().zip(&value).for_each(|(s, v)| *s += w * v);
                }
                step.iter_mut().for_each(|v| *v *= h);
            }
            if step.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver { step: k });
            }
            psi.iter_mut().zip(&step).for_each(|(p, s)| *p += s);
        } else {
            step.iter_mut().for_each(|v| *v = 0.0);
        }
        if let (Some(r), None) = (radius, escape_time) {
            if psi.iter().any(|v| v.abs() > r) {
                escape_time = Some(t);
            }
        }
        times.push(t);
        for c in 0..d {
            values.push(psi[c] + path.point(kk)[c]);
        }
        drift_part.extend_from_slice(&psi);
        drift_steps.extend_from_slice(&step);
    }
    Ok(SolutionPath {
        scheme: Scheme::NonlinearYoung,
        level,
        dim: d,
        times,
        values,
        drift_part,
        drift_steps,
        escape_time,
    })
}

/// Euler-Maruyama `X_{k+1} = X_k + b(t_k, X_k) h + (W_{t_{k+1}} - W_{t_k})` from
/// outer grid index `start` with `X = x`.
pub fn solve_euler_from(
    b: &DriftField,
    path: &BrownianPath,
    start: usize,
    x: &[f64],
    level: u32,
    radius: Option<f64>,
) -> Result<SolutionPath> {
    let stride = check_level(path, level)?;
    let d = path.dim();
    if x.len() != d || b.dim != d {
        return Err(Error::Incompatible(format!(
            "drift dim {}, path dim {d}, initial point dim {}",
            b.dim,
            x.len()
        )));
    }
    let n = 1usize << level;
    if start > n {
        return Err(Error::Domain(format!("start index {start} beyond grid of {n} steps")));
    }
    let grid = path.grid();
    let h = grid.horizon() / n as f64;
    let rows = n - start + 1;
    let mut times = Vec::with_capacity(rows);
    let mut values = Vec::with_capacity(rows * d);
    let mut drift_part = Vec::with_capacity(rows * d);
    let mut drift_steps = Vec::with_capacity(rows * d);
    let mut y = x.to_vec();
    let mut psi: Vec<f64> = (0..d).map(|c| x[c] - path.point(start * stride)[c]).collect();
    let mut escape_time = None;
    let mut drift = vec![0.0; d];
    for k in start..=n {
        let kk = k * stride;
        let t = grid.time(kk);
        if k > start {
            let prev = (k - 1) * stride;
            b.eval_into(grid.time(prev), &y, &mut drift);
            for c in 0..d {
                let inc = drift[c] * h;
                psi[c] += inc;
                y[c] = path.point(kk)[c] + psi[c];
                drift[c] = inc;
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Solver { step: k });
            }
        } else {
            drift.iter_mut().for_each(|v| *v = 0.0);
        }
        if let (Some(r), None) = (radius, escape_time) {
            if psi.iter().any(|v| v.abs() > r) {
                escape_time = Some(t);
            }
        }
        times.push(t);
        values.extend_from_slice(&y);
        drift_part.extend_from_slice(&psi);
        drift_steps.extend_from_slice(&drift);
    }
    Ok(SolutionPath {
        scheme: Scheme::EulerMaruyama,
        level,
        dim: d,
        times,
        values,
        drift_part,
        drift_steps,
        escape_time,
    })
}

/// Germ families with known sewing limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GermClass {
    /// `g(t) - g(s)`.
    Additive,
    /// `g(s) (t - s)`.
    LeftPoint,
    /// `f(y_s) (x_t - x_s)` for smooth `f`, `x`, `y`.
    Young,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelftestConfig {
    pub instances: usize,
    pub seed: u64,
    /// Sewing level of the additive and left-point instances.
    pub level: u32,
    /// Sewing level of the Young instances.
    pub young_level: u32,
    pub certified_levels: u32,
    /// Relative tolerance of the Young totals against the quadrature oracle.
    pub young_tolerance: f64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        Self {
            instances: 1000,
            seed: 0x5e3,
            level: 12,
            young_level: 20,
            certified_levels: 3,
            young_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestCase {
    pub index: usize,
    pub class: GermClass,
    pub start: f64,
    pub end: f64,
    /// Largest `true error / certified bound` over the certified intervals.
    pub worst_ratio: f64,
    pub certified: bool,
    /// `|total - oracle| / |oracle|` for Young instances.
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub config: SelftestConfig,
    pub cases: Vec<SelftestCase>,
    /// Intervals whose true error exceeds the certificate, plus uncertified instances.
    pub violations: usize,
    pub intervals_checked: usize,
    pub worst_ratio: f64,
    pub young_max_relative: f64,
    pub pass: bool,
}

/// `a sin(omega t + phi) + c t` with its derivative bound.
#[derive(Clone, Copy)]
struct Wave {
    a: f64,
    omega: f64,
    phi: f64,
    c: f64,
}

impl Wave {
    fn at(&self, t: f64) -> f64 {
        self.a * (self.omega * t + self.phi).sin() + self.c * t
    }
    fn slope(&self, t: f64) -> f64 {
        self.a * self.omega * (self.omega * t + self.phi).cos() + self.c
    }
    fn lipschitz(&self) -> f64 {
        self.a.abs() * self.omega + self.c.abs()
    }
}

/// Sew randomized germs with analytically known limits and compare the sewn
/// increments on every certified interval with the exact ones.
pub fn sewing_selftest(config: &SelftestConfig) -> Result<SelftestReport> {
    let rng = crate::rng::CounterRng::new(config.seed);
    let oracle_rule = crate::quad::GaussLegendre::new(20);
    let mut cases = Vec::with_capacity(config.instances);
    let mut violations = 0;
    let mut intervals_checked = 0;
    for i in 0..config.instances {
        let u = |lane: u32| rng.uniform(i as u64, lane);
        let start = u(0);
        let end = start + 0.25 + 0.75 * u(1);
        let w1 = Wave { a: 2.0 * u(2) - 1.0, omega: 1.0 + 4.0 * u(3), phi: 6.0 * u(4), c: u(5) - 0.5 };
        let class = [GermClass::Additive, GermClass::LeftPoint, GermClass::Young][i % 3];
        let (germ, exact): (Germ<'_>, Box<dyn Fn(f64, f64) -> f64>) = match class {
            GermClass::Additive => (
                Germ::new(1, Coherence { constant: 0.0, theta: 2.0 }, ControlFunction::length(), move |s, t| {
                    vec![w1.at(t) - w1.at(s)]
                }),
                Box::new(move |s, t| w1.at(t) - w1.at(s)),
            ),
            GermClass::LeftPoint => {
                // exact: int g = a/omega (cos(omega s + phi) - cos(omega t + phi)) + c (t^2 - s^2) / 2
                let exact = move |s: f64, t: f64| {
                    w1.a / w1.omega * ((w1.omega * s + w1.phi).cos() - (w1.omega * t + w1.phi).cos())
                        + w1.c * (t * t - s * s) / 2.0
                };
                (
                    Germ::new(
                        1,
                        Coherence { constant: w1.lipschitz() / 4.0, theta: 2.0 },
                        ControlFunction::length(),
                        move |s, t| vec![w1.at(s) * (t - s)],
                    ),
                    Box::new(exact),
                )
            }
            GermClass::Young => {
                // f(y) = 2 + sin(k y) > 0 and x' > 0 keep the integral away from zero
                let k = u(6);
                let y = Wave { a: 0.5 * u(7), omega: 1.0, phi: 6.0 * u(8), c: 0.0 };
                let x = Wave { a: 0.5 * u(9), omega: 1.0, phi: 6.0 * u(10), c: 1.0 };
                let f = move |v: f64| 2.0 + (k * v).sin();
                let rule = &oracle_rule;
                (
                    Germ::new(
                        1,
                        Coherence { constant: k * y.lipschitz() * x.lipschitz() / 4.0, theta: 2.0 },
                        ControlFunction::length(),
                        move |s, t| vec![f(y.at(s)) * (x.at(t) - x.at(s))],
                    ),
                    Box::new(move |s, t| rule.composite(s, t, 16, |r| f(y.at(r)) * x.slope(r))),
                )
            }
        };
        let level = if class == GermClass::Young { config.young_level } else { config.level };
        let r = sew(&germ, start, end, level, config.certified_levels)?;
        let mut worst = 0.0f64;
        let certified = r.certificate.is_some();
        if let Some(cert) = &r.certificate {
            let n = (1usize << level) as f64;
            for c in &cert.intervals {
                let a = ((c.s - start) / (end - start) * n).round() as usize;
                let b = ((c.t - start) / (end - start) * n).round() as usize;
                let err = (r.increment(a, b)[0] - exact(c.s, c.t)).abs();
                let bound = c.total();
                let ratio = if bound > 0.0 { err / bound } else if err == 0.0 { 0.0 } else { f64::INFINITY };
                worst = worst.max(ratio);
                intervals_checked += 1;
                if ratio > 1.0 {
                    violations += 1;
                }
            }
        } else {
            violations += 1;
        }
        let relative_error = (class == GermClass::Young).then(|| {
            let o = exact(start, end);
            (r.total()[0] - o).abs() / o.abs()
        });
        cases.push(SelftestCase { index: i, class, start, end, worst_ratio: worst, certified, relative_error });
    }
    let worst_ratio = cases.iter().map(|c| c.worst_ratio).fold(0.0, f64::max);
    let young_max_relative = cases.iter().filter_map(|c| c.relative_error).fold(0.0, f64::max);
    Ok(SelftestReport {
        config: *config,
        pass: violations == 0 && young_max_relative <= config.young_tolerance,
        cases,
        violations,
        intervals_checked,
        worst_ratio,
        young_max_relative,
    })
}
