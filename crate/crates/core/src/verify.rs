//! Monte Carlo checks of the moment estimates against heat-kernel quadrature
//! oracles, John-Nirenberg amplification, stability and summability
//! experiments, and the regularization demonstration.

use std::cell::Cell;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::averaging::{cumulative_average_1d, cumulative_gradient_1d, fmt};
use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::fields::{
    bessel_norm, lqp_norm, lqp_norm_on, stability_condition, DriftField, DriftSpec, Exponent, NormOptions,
    StabilityCondition,
};
use crate::flow::{
    bands_around, build_flow, solve_em, uniqueness_certificate, Bands, CertificateThresholds, FlowSpec, Lattice,
    UniquenessReport,
};
use crate::paths::{generate_path, BrownianPath};
use crate::quad::GaussLegendre;
use crate::rng::ensemble_seed;
use crate::sewing::{solve_nonlinear_young, solve_nonlinear_young_from, ControlFunction, Scheme};
use crate::stats::{fit_line, median, root_moment, Moments};

/// Cap on integrand evaluations of the generic second-moment quadrature.
pub const SECOND_MOMENT_CAP: u64 = 1 << 31;

/// Relative standard error of a moment above which the ensemble is flagged as too small.
pub const MAX_RELATIVE_SE: f64 = 0.25;

/// A deterministic reference value with an error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    pub value: f64,
    pub error: f64,
}

/// How [`oracle_second_moment`] evaluates the inner spatial integrals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleRoute {
    /// Gaussian integrals in closed form for bumps, quadrature otherwise.
    #[default]
    Auto,
    Quadrature,
}

#[inline]
fn heat(r: f64, y: f64) -> f64 {
    (-0.5 * y * y / r).exp() / (2.0 * std::f64::consts::PI * r).sqrt()
}

/// `[a, a + (b-a) 2^-levels, ..., a + (b-a)/2, b]`.
fn graded(a: f64, b: f64, levels: i32) -> Vec<f64> {
    let mut cuts = vec![a];
    cuts.extend((0..=levels).rev().map(|k| a + (b - a) * 0.5f64.powi(k)));
    cuts
}

fn with_breaks(lo: f64, hi: f64, breaks: &[f64]) -> Vec<f64> {
    let mut cuts = vec![lo];
    cuts.extend(breaks.iter().copied().filter(|b| *b > lo && *b < hi));
    cuts.push(hi);
    cuts
}

fn integrate_cuts<F: FnMut(f64) -> f64>(rule: &GaussLegendre, cuts: &[f64], max_width: f64, mut f: F) -> f64 {
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        let panels = if max_width.is_finite() {
            ((len / max_width).ceil() as usize).max(1)
        } else {
            1
        };
        total += rule.composite(w[0], w[1], panels, &mut f);
    }
    total
}

fn check_interval(s: f64, t: f64) -> Result<()> {
    if !(0.0 <= s && s <= t && t.is_finite()) {
        return Err(Error::Domain(format!("need 0 <= s <= t, got [{s}, {t}]")));
    }
    Ok(())
}

fn check_scalar(f: &DriftField, what: &str) -> Result<()> {
    if f.dim != 1 {
        return Err(Error::Unsupported(format!("{what} is implemented for d = 1, got d = {}", f.dim)));
    }
    Ok(())
}

/// Spatial window `[-8 sqrt(r), 8 sqrt(r)] + shift`, intersected with the support.
fn window(f: &DriftField, sd: f64, shift: f64) -> Option<(f64, f64)> {
    let (mut lo, mut hi) = (shift - 8.0 * sd, shift + 8.0 * sd);
    if let Some(rf) = f.support_radius() {
        lo = lo.max(-rf);
        hi = hi.min(rf);
    }
    (lo < hi).then_some((lo, hi))
}

/// `E int_s^t f(r, W_r) dr = int_s^t int f(r, y) p_r(y) dy dr` by nested Gauss-Legendre
/// quadrature; the error is the difference to a lower-order rule.
pub fn oracle_first_moment(f: &DriftField, s: f64, t: f64) -> Result<OracleValue> {
    check_scalar(f, "the first-moment oracle")?;
    check_interval(s, t)?;
    if s == t {
        return Ok(OracleValue { value: 0.0, error: 0.0 });
    }
    let (breaks, scale) = f.quadrature_hints();
    let bad = Cell::new(None);
    let run = |n: usize| {
        let rule = GaussLegendre::new(n);
        integrate_cuts(&rule, &graded(s, t, 40), f64::INFINITY, |r| {
            let sd = r.sqrt();
            let Some((lo, hi)) = window(f, sd, 0.0) else {
                return 0.0;
            };
            integrate_cuts(&rule, &with_breaks(lo, hi, &breaks), scale.min(sd), |y| {
                let v = f.eval1(r, y);
                if !v.is_finite() {
                    bad.set(Some((r, y)));
                }
                v * heat(r, y)
            })
        })
    };
    let fine = run(12);
    let coarse = run(8);
    if let Some((r, y)) = bad.get() {
        return Err(Error::Evaluation {
            field: f.name(),
            t: r,
            x: vec![y],
        });
    }
    Ok(OracleValue {
        value: fine,
        error: (fine - coarse).abs(),
    })
}

/// `(amplitude, width, center)` of a time-independent Gaussian bump, possibly scaled.
fn bump_parts(spec: &DriftSpec) -> Option<(f64, f64, f64)> {
    match spec {
        DriftSpec::GaussianBump { width, amplitude, center } => Some((*amplitude, *width, *center)),
        DriftSpec::Scale { factor, inner } => bump_parts(inner).map(|(a, w, c)| (a * factor, w, c)),
        _ => None,
    }
}

/// `E[f'(W_r) f'(W_{r+tau})]` for `f = a exp(-(x-c)^2 / (2 delta^2))`.
fn bump_kernel(a: f64, delta: f64, c: f64, r: f64, tau: f64) -> f64 {
    let d2 = delta * delta;
    let e = d2 + tau;
    let b = 1.0 / d2 + 1.0 / e;
    let big = b + 1.0 / r;
    let mu = -c / (big * r);
    let pref = a * a * delta / (d2 * e.powf(1.5));
    pref / (r * big).sqrt() * (1.0 / big + mu * mu) * (-c * c * b / (2.0 * (1.0 + b * r))).exp()
}

/// `E|V_t - V_s|^2` for `V_t = int_0^t f'(r, W_r) dr` (`d = 1`, smooth `f`).
///
/// Expands the square into `2 int_s^t int_0^{t-r} E[f'(r, W_r) f'(r+tau, W_{r+tau})] dtau dr`
/// and writes the inner expectation with the gradient of the heat kernel,
/// `E[f'(u + W_tau)] = int f(u + z) (z / tau) p_tau(z) dz`.
pub fn oracle_second_moment(f: &DriftField, s: f64, t: f64, route: OracleRoute) -> Result<OracleValue> {
    check_scalar(f, "the second-moment oracle")?;
    check_interval(s, t)?;
    if !f.is_smooth() {
        return Err(Error::Precondition(format!("second-moment oracle needs a smooth drift, got {}", f.name())));
    }
    if s == t || matches!(f.spec, DriftSpec::Zero | DriftSpec::Constant { .. }) {
        return Ok(OracleValue { value: 0.0, error: 0.0 });
    }
    let outer = |n: usize, levels: i32, kernel: &dyn Fn(&GaussLegendre, f64, f64) -> f64| {
        let rule = GaussLegendre::new(n);
        2.0 * integrate_cuts(&rule, &graded(s, t, levels), f64::INFINITY, |r| {
            integrate_cuts(&rule, &graded(0.0, t - r, levels), f64::INFINITY, |tau| kernel(&rule, r, tau))
        })
    };
    if route == OracleRoute::Auto {
        if let Some((a, delta, c)) = bump_parts(&f.spec) {
            let k = |_: &GaussLegendre, r: f64, tau: f64| bump_kernel(a, delta, c, r, tau);
            let fine = outer(12, 40, &k);
            let coarse = outer(8, 40, &k);
            return Ok(OracleValue {
                value: fine,
                error: (fine - coarse).abs(),
            });
        }
    }
    let (breaks, scale) = f.quadrature_hints();
    let count = Cell::new(0u64);
    let kernel = |rule: &GaussLegendre, r: f64, tau: f64| -> f64 {
        if count.get() > SECOND_MOMENT_CAP {
            return 0.0;
        }
        let r2 = r + tau;
        let (sr, st) = (r.sqrt(), tau.sqrt());
        let Some((lo, hi)) = window(f, sr, 0.0) else {
            return 0.0;
        };
        integrate_cuts(rule, &with_breaks(lo, hi, &breaks), scale.min(4.0 * sr), |y| {
            let fy = f.gradient1_unchecked(r, y);
            if fy == 0.0 {
                return 0.0;
            }
            // E f'(r2, y + W_tau) through the heat-kernel gradient
            let Some((zlo, zhi)) = window(f, st, y) else {
                return 0.0;
            };
            let g = integrate_cuts(rule, &with_breaks(zlo, zhi, &breaks), scale.min(4.0 * st), |u| {
                count.set(count.get() + 1);
                let z = u - y;
                f.eval1(r2, u) * (z / tau) * heat(tau, z)
            });
            heat(r, y) * fy * g
        })
    };
    let fine = outer(8, 16, &kernel);
    let coarse = outer(6, 16, &kernel);
    if count.get() > SECOND_MOMENT_CAP {
        return Err(Error::Resource {
            what: "second-moment quadrature evaluations (use the Monte Carlo estimate instead)",
            requested: count.get() as u128,
            cap: SECOND_MOMENT_CAP as u128,
        });
    }
    Ok(OracleValue {
        value: fine,
        error: (fine - coarse).abs(),
    })
}

/// Monte Carlo ensemble: `paths` Brownian paths of the given level on `[0, horizon]`,
/// path `i` seeded with `ensemble_seed(master_seed, i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub paths: usize,
    pub level: u32,
    pub horizon: f64,
    pub master_seed: u64,
}

impl Ensemble {
    fn path(&self, i: usize, dim: usize) -> Result<BrownianPath> {
        generate_path(ensemble_seed(self.master_seed, i as u64), self.horizon, self.level, dim)
    }

    fn indices(&self, intervals: &[(f64, f64)]) -> Result<Vec<(usize, usize)>> {
        let grid = crate::paths::DyadicGrid::new(self.horizon, self.level)?;
        intervals
            .iter()
            .map(|&(s, t)| {
                check_interval(s, t)?;
                match (grid.index_of(s), grid.index_of(t)) {
                    (Some(i), Some(j)) if s < t => Ok((i, j)),
                    _ => Err(Error::Domain(format!(
                        "interval [{s}, {t}] does not have distinct endpoints on the level-{} grid",
                        self.level
                    ))),
                }
            })
            .collect()
    }

    /// Per-path sample vectors, in path order.
    fn samples<F>(&self, dim: usize, backend: Backend, per_path: F) -> Result<Vec<Vec<f64>>>
    where
        F: Fn(&BrownianPath) -> Result<Vec<f64>> + Sync + Send,
    {
        if self.paths < 2 {
            return Err(Error::Parameter("an ensemble needs at least 2 paths".into()));
        }
        backend.try_map(self.paths, |i| per_path(&self.path(i, dim)?))
    }
}

/// Which expectation a [`MomentReport`] estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    Gradient,
    Difference,
    Krylov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCell {
    pub m: f64,
    pub s: f64,
    pub t: f64,
    /// `|x - y|` for difference moments.
    pub separation: Option<f64>,
    /// Sample mean of `|X|^m` and its standard error.
    pub moment: f64,
    pub moment_se: f64,
    pub root: f64,
    pub root_se: f64,
    /// `root / ||f||_{L^q_p([s,t])}`.
    pub normalized_root: f64,
    pub oracle: Option<OracleValue>,
    /// `(moment - oracle) / moment_se`.
    pub z_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub m: f64,
    pub slope: f64,
    pub slope_se: f64,
    pub normalized_slope: f64,
    pub normalized_slope_se: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaPoint {
    pub m: f64,
    pub root: f64,
    pub root_se: f64,
    /// `Gamma(m g + 1)^{1/m}` for the growth index `g` of the estimate.
    pub gamma_root: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceFit {
    pub m: f64,
    pub s: f64,
    pub t: f64,
    pub separations: Vec<f64>,
    pub roots: Vec<f64>,
    pub root_ses: Vec<f64>,
    pub slope: f64,
    pub slope_se: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub kind: MomentKind,
    pub drift: String,
    pub p: Exponent,
    pub q: Exponent,
    pub dim: usize,
    pub m_list: Vec<f64>,
    pub intervals: Vec<(f64, f64)>,
    /// `||f||_{L^q_p([s,t])}` per interval.
    pub norms: Vec<f64>,
    pub cells: Vec<MomentCell>,
    /// Time slopes per `m` (at the first separation for difference moments).
    pub slopes: Vec<SlopeFit>,
    pub theoretical_exponent: f64,
    pub gamma_growth: Vec<GammaPoint>,
    pub space: Vec<SpaceFit>,
    pub ensemble: Ensemble,
    pub warnings: Vec<String>,
}

impl MomentReport {
    pub fn slope(&self, m: f64) -> Option<&SlopeFit> {
        self.slopes.iter().find(|s| s.m == m)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "kind,m,s,t,separation,moment,moment_se,root,root_se,normalized_root,oracle,oracle_error,z_score"
        )?;
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                serde_json::to_value(self.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                fmt(c.m),
                fmt(c.s),
                fmt(c.t),
                opt(c.separation),
                fmt(c.moment),
                fmt(c.moment_se),
                fmt(c.root),
                fmt(c.root_se),
                fmt(c.normalized_root),
                opt(c.oracle.map(|o| o.value)),
                opt(c.oracle.map(|o| o.error)),
                opt(c.z_score)
            )?;
        }
        Ok(())
    }
}

fn norm_radius(f: &DriftField) -> f64 {
    f.support_radius().filter(|r| *r > 0.0).unwrap_or(10.0)
}

fn norm_options(f: &DriftField, radius: f64) -> NormOptions {
    let (_, scale) = f.quadrature_hints();
    let cells = if scale.is_finite() {
        ((2.0 * radius / (scale / 8.0)).ceil() as usize).clamp(512, 1 << 16)
    } else {
        4096
    };
    NormOptions {
        time_cells: 64,
        space_cells: cells,
    }
}

fn interval_norms(f: &DriftField, intervals: &[(f64, f64)]) -> Result<Vec<f64>> {
    let radius = norm_radius(f);
    let opts = norm_options(f, radius);
    intervals
        .iter()
        .map(|&(s, t)| Ok(lqp_norm_on(f, s, t, radius, f.p, f.q, opts)?.value))
        .collect()
}

fn cell(m: f64, s: f64, t: f64, separation: Option<f64>, samples: &[f64], norm: f64) -> MomentCell {
    let powered: Vec<f64> = samples.iter().map(|x| x.abs().powf(m)).collect();
    let mom = Moments::from_slice(&powered);
    let (root, root_se) = root_moment(samples, m);
    MomentCell {
        m,
        s,
        t,
        separation,
        moment: mom.mean,
        moment_se: mom.std_error(),
        root,
        root_se,
        normalized_root: root / norm,
        oracle: None,
        z_score: None,
    }
}

fn attach_oracle(c: &mut MomentCell, oracle: OracleValue) {
    c.z_score = Some(if c.moment_se > 0.0 {
        (c.moment - oracle.value) / c.moment_se
    } else if c.moment == oracle.value {
        0.0
    } else {
        f64::INFINITY
    });
    c.oracle = Some(oracle);
}

/// Weighted fit of `ln y` against `ln x` with weights `(y / se)^2`.
fn log_fit(xs: &[f64], ys: &[f64], ses: &[f64]) -> Option<crate::stats::LineFit> {
    if ys.iter().any(|y| !(*y > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let weights: Vec<f64> = if ses.iter().all(|s| *s > 0.0) {
        ys.iter().zip(ses).map(|(y, s)| (y / s).powi(2)).collect()
    } else {
        Vec::new()
    };
    fit_line(&lx, &ly, &weights)
}

fn time_slopes(cells: &[&MomentCell], m: f64, warnings: &mut Vec<String>) -> SlopeFit {
    let lengths: Vec<f64> = cells.iter().map(|c| c.t - c.s).collect();
    let roots: Vec<f64> = cells.iter().map(|c| c.root).collect();
    let normalized: Vec<f64> = cells.iter().map(|c| c.normalized_root).collect();
    let ses: Vec<f64> = cells.iter().map(|c| c.root_se).collect();
    let nses: Vec<f64> = cells.iter().map(|c| c.root_se / c.root * c.normalized_root).collect();
    let raw = log_fit(&lengths, &roots, &ses);
    let norm = log_fit(&lengths, &normalized, &nses);
    if raw.is_none() {
        warnings.push(format!("m = {m}: moments vanish or too few intervals; no slope fitted"));
    }
    SlopeFit {
        m,
        slope: raw.as_ref().map_or(f64::NAN, |f| f.slope),
        slope_se: raw.as_ref().map_or(f64::NAN, |f| f.slope_se),
        normalized_slope: norm.as_ref().map_or(f64::NAN, |f| f.slope),
        normalized_slope_se: norm.as_ref().map_or(f64::NAN, |f| f.slope_se),
        r_squared: norm.as_ref().map_or(f64::NAN, |f| f.r_squared),
    }
}

fn flag_small_ensembles(cells: &[MomentCell], warnings: &mut Vec<String>) {
    for c in cells {
        if c.moment > 0.0 && c.moment_se / c.moment > MAX_RELATIVE_SE {
            warnings.push(format!(
                "m = {} on [{}, {}]: relative standard error {:.2}; ensemble too small for this moment",
                c.m,
                c.s,
                c.t,
                c.moment_se / c.moment
            ));
        }
    }
}

fn gamma_root(m: f64, growth: f64) -> f64 {
    (ln_gamma(m * growth + 1.0) / m).exp()
}

fn check_m_list(m_list: &[f64]) -> Result<()> {
    if m_list.is_empty() || m_list.iter().any(|m| !(*m >= 1.0)) {
        return Err(Error::Parameter(format!("moment orders must be >= 1, got {m_list:?}")));
    }
    Ok(())
}

/// Cumulative integrals sampled at interval endpoints, `V_t - V_s` per interval.
fn increments(cumulative: &[f64], idx: &[(usize, usize)]) -> Vec<f64> {
    idx.iter().map(|&(i, j)| cumulative[j] - cumulative[i]).collect()
}

/// Moments of `int_s^t f'(W_r) dr` over an ensemble (`d = 1`, smooth `f`). Cells with
/// `m = 2` are compared with [`oracle_second_moment`] when `f` is a Gaussian bump.
pub fn mc_gradient_moment(
    f: &DriftField,
    m_list: &[f64],
    intervals: &[(f64, f64)],
    ensemble: &Ensemble,
    backend: Backend,
) -> Result<MomentReport> {
    check_scalar(f, "the gradient moment")?;
    check_m_list(m_list)?;
    if !f.is_smooth() {
        return Err(Error::Precondition(format!("gradient moments need a smooth drift, got {}", f.name())));
    }
    let idx = ensemble.indices(intervals)?;
    let samples = ensemble.samples(1, backend, |path| Ok(increments(&cumulative_gradient_1d(f, path)?, &idx)))?;
    let norms = interval_norms(f, intervals)?;
    let (d, ip, iq) = (f.dim as f64, f.p.reciprocal(), f.q.reciprocal());
    let mut warnings = Vec::new();
    let mut cells = Vec::new();
    for &m in m_list {
        for (k, &(s, t)) in intervals.iter().enumerate() {
            let col: Vec<f64> = samples.iter().map(|v| v[k]).collect();
            let mut c = cell(m, s, t, None, &col, norms[k]);
            if m == 2.0 && bump_parts(&f.spec).is_some() {
                attach_oracle(&mut c, oracle_second_moment(f, s, t, OracleRoute::Auto)?);
            }
            cells.push(c);
        }
    }
    flag_small_ensembles(&cells, &mut warnings);
    let slopes = m_list
        .iter()
        .map(|&m| {
            let cs: Vec<&MomentCell> = cells.iter().filter(|c| c.m == m).collect();
            time_slopes(&cs, m, &mut warnings)
        })
        .collect();
    let growth = 0.5 + d * ip / 2.0;
    let gamma_growth = gamma_series(&cells, intervals, m_list, growth);
    Ok(MomentReport {
        kind: MomentKind::Gradient,
        drift: f.name(),
        p: f.p,
        q: f.q,
        dim: f.dim,
        m_list: m_list.to_vec(),
        intervals: intervals.to_vec(),
        norms,
        cells,
        slopes,
        theoretical_exponent: 0.5 - iq - d * ip / 2.0,
        gamma_growth,
        space: Vec::new(),
        ensemble: *ensemble,
        warnings,
    })
}

/// Root moments against `Gamma(m g + 1)^{1/m}` on the longest interval.
fn gamma_series(cells: &[MomentCell], intervals: &[(f64, f64)], m_list: &[f64], growth: f64) -> Vec<GammaPoint> {
    let Some(&(s, t)) = intervals.iter().max_by(|a, b| (a.1 - a.0).total_cmp(&(b.1 - b.0))) else {
        return Vec::new();
    };
    m_list
        .iter()
        .filter_map(|&m| {
            let c = cells.iter().find(|c| c.m == m && c.s == s && c.t == t && c.separation.is_none_or(|_| true))?;
            let g = gamma_root(m, growth);
            Some(GammaPoint {
                m,
                root: c.root,
                root_se: c.root_se,
                gamma_root: g,
                ratio: c.root / g,
            })
        })
        .collect()
}

/// Moments of `int_s^t [f(W_r + x) - f(W_r + y)] dr` for the symmetric pairs
/// `x, y = center -+ a/2`, one per separation `a` (`d = 1`).
pub fn mc_difference_moment(
    f: &DriftField,
    center: f64,
    separations: &[f64],
    m_list: &[f64],
    intervals: &[(f64, f64)],
    ensemble: &Ensemble,
    backend: Backend,
) -> Result<MomentReport> {
    check_scalar(f, "the difference moment")?;
    check_m_list(m_list)?;
    if separations.is_empty() || separations.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Parameter(format!("separations must be >= 0, got {separations:?}")));
    }
    let idx = ensemble.indices(intervals)?;
    let ni = intervals.len();
    let samples = ensemble.samples(1, backend, |path| {
        let mut out = Vec::with_capacity(separations.len() * ni);
        for &a in separations {
            let (x, y) = (center - a / 2.0, center + a / 2.0);
            if x == y {
                out.extend(std::iter::repeat_n(0.0, ni));
                continue;
            }
            let cx = cumulative_average_1d(f, path, x);
            let cy = cumulative_average_1d(f, path, y);
            out.extend(idx.iter().map(|&(i, j)| (cx[j] - cx[i]) - (cy[j] - cy[i])));
        }
        Ok(out)
    })?;
    let norms = interval_norms(f, intervals)?;
    let (d, ip, iq) = (f.dim as f64, f.p.reciprocal(), f.q.reciprocal());
    let mut warnings = Vec::new();
    let mut cells = Vec::new();
    for &m in m_list {
        for (ai, &a) in separations.iter().enumerate() {
            for (k, &(s, t)) in intervals.iter().enumerate() {
                let col: Vec<f64> = samples.iter().map(|v| v[ai * ni + k]).collect();
                cells.push(cell(m, s, t, Some(a), &col, norms[k]));
            }
        }
    }
    flag_small_ensembles(&cells, &mut warnings);
    let longest = intervals
        .iter()
        .copied()
        .max_by(|a, b| (a.1 - a.0).total_cmp(&(b.1 - b.0)))
        .expect("at least one interval");
    let mut slopes = Vec::new();
    let mut space = Vec::new();
    for &m in m_list {
        let cs: Vec<&MomentCell> = cells
            .iter()
            .filter(|c| c.m == m && c.separation == Some(separations[0]))
            .collect();
        slopes.push(time_slopes(&cs, m, &mut warnings));
        let at: Vec<&MomentCell> = cells
            .iter()
            .filter(|c| c.m == m && (c.s, c.t) == longest)
            .collect();
        let seps: Vec<f64> = at.iter().map(|c| c.separation.unwrap()).collect();
        let roots: Vec<f64> = at.iter().map(|c| c.root).collect();
        let ses: Vec<f64> = at.iter().map(|c| c.root_se).collect();
        let fit = log_fit(&seps, &roots, &ses);
        if fit.is_none() {
            warnings.push(format!("m = {m}: no space slope (vanishing moments or a single separation)"));
        }
        space.push(SpaceFit {
            m,
            s: longest.0,
            t: longest.1,
            separations: seps,
            roots,
            root_ses: ses,
            slope: fit.as_ref().map_or(f64::NAN, |f| f.slope),
            slope_se: fit.as_ref().map_or(f64::NAN, |f| f.slope_se),
            r_squared: fit.as_ref().map_or(f64::NAN, |f| f.r_squared),
        });
    }
    let first: Vec<MomentCell> = cells
        .iter()
        .filter(|c| c.separation == Some(separations[separations.len() - 1]))
        .cloned()
        .collect();
    let gamma_growth = gamma_series(&first, intervals, m_list, 0.5 + d * ip / 2.0);
    Ok(MomentReport {
        kind: MomentKind::Difference,
        drift: f.name(),
        p: f.p,
        q: f.q,
        dim: f.dim,
        m_list: m_list.to_vec(),
        intervals: intervals.to_vec(),
        norms,
        cells,
        slopes,
        theoretical_exponent: 0.5 - iq - d * ip / 2.0,
        gamma_growth,
        space,
        ensemble: *ensemble,
        warnings,
    })
}

/// Moments of `int_s^t f(W_r) dr` for `f >= 0` (`d = 1`); `m = 1` cells are compared
/// with [`oracle_first_moment`].
pub fn mc_krylov_moment(
    f: &DriftField,
    m_list: &[f64],
    intervals: &[(f64, f64)],
    ensemble: &Ensemble,
    backend: Backend,
) -> Result<MomentReport> {
    check_scalar(f, "the Krylov moment")?;
    check_m_list(m_list)?;
    let (breaks, scale) = f.quadrature_hints();
    let probe_step = if scale.is_finite() { scale / 4.0 } else { 1.0 / 64.0 };
    let mut probes: Vec<f64> = (-2048..=2048).map(|k| k as f64 * probe_step).collect();
    probes.extend(&breaks);
    if let Some(y) = probes.iter().find(|&&y| f.eval1(0.0, y) < 0.0) {
        return Err(Error::Precondition(format!("Krylov moments need f >= 0; f({y}) < 0")));
    }
    let idx = ensemble.indices(intervals)?;
    let samples = ensemble.samples(1, backend, |path| Ok(increments(&cumulative_average_1d(f, path, 0.0), &idx)))?;
    let norms = interval_norms(f, intervals)?;
    let (d, ip, iq) = (f.dim as f64, f.p.reciprocal(), f.q.reciprocal());
    let mut warnings = Vec::new();
    let mut cells = Vec::new();
    for &m in m_list {
        for (k, &(s, t)) in intervals.iter().enumerate() {
            let col: Vec<f64> = samples.iter().map(|v| v[k]).collect();
            let mut c = cell(m, s, t, None, &col, norms[k]);
            if m == 1.0 {
                attach_oracle(&mut c, oracle_first_moment(f, s, t)?);
            }
            cells.push(c);
        }
    }
    flag_small_ensembles(&cells, &mut warnings);
    let slopes = m_list
        .iter()
        .map(|&m| {
            let cs: Vec<&MomentCell> = cells.iter().filter(|c| c.m == m).collect();
            time_slopes(&cs, m, &mut warnings)
        })
        .collect();
    let gamma_growth = gamma_series(&cells, intervals, m_list, d * ip / 2.0 + iq);
    Ok(MomentReport {
        kind: MomentKind::Krylov,
        drift: f.name(),
        p: f.p,
        q: f.q,
        dim: f.dim,
        m_list: m_list.to_vec(),
        intervals: intervals.to_vec(),
        norms,
        cells,
        slopes,
        theoretical_exponent: 1.0 - d * ip - 2.0 * iq,
        gamma_growth,
        space: Vec::new(),
        ensemble: *ensemble,
        warnings,
    })
}

/// `P(sup_{u <= 1} |W_u| > a)`.
pub fn brownian_sup_tail(a: f64) -> f64 {
    if a <= 0.0 {
        return 1.0;
    }
    if a >= 1.0 {
        // 4 sum_j (-1)^j Phi^c((2j+1) a)
        let mut s = 0.0;
        for j in 0..50 {
            let term = 0.5 * erfc((2 * j + 1) as f64 * a / std::f64::consts::SQRT_2);
            s += if j % 2 == 0 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        (4.0 * s).clamp(0.0, 1.0)
    } else {
        // 1 - (4/pi) sum_n (-1)^n / (2n+1) exp(-(2n+1)^2 pi^2 / (8 a^2))
        let pi = std::f64::consts::PI;
        let mut s = 0.0;
        for n in 0..50 {
            let k = (2 * n + 1) as f64;
            let term = (-k * k * pi * pi / (8.0 * a * a)).exp() / k;
            s += if n % 2 == 0 { term } else { -term };
            if term < 1e-300 {
                break;
            }
        }
        (1.0 - 4.0 / pi * s).clamp(0.0, 1.0)
    }
}

/// `E (sup_{u <= h} |W_u|)^m` from the exact distribution of the running maximum.
pub fn brownian_sup_moment(m: f64, h: f64) -> f64 {
    let rule = GaussLegendre::new(12);
    let unit = rule.composite(0.0, 12.0, 240, |a| m * a.powf(m - 1.0) * brownian_sup_tail(a));
    unit * h.powf(m / 2.0)
}

/// Processes with known conditional increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JnProcess {
    Zero,
    /// `scale * W`.
    Brownian { scale: f64 },
    /// `V_t = int_0^t f'(W_r) dr`.
    GradientAverage { field: DriftField },
}

/// `E_s |V_t - V_s|` against the premise bound `w(s,t)^alpha`, where known in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PremiseCheck {
    pub mean_abs_increment: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JnReport {
    pub process: JnProcess,
    pub alpha: f64,
    pub s: f64,
    pub t: f64,
    pub m_list: Vec<f64>,
    /// `||sup_{u in [s,t]} |V_u - V_s|||_{L^m}` per `m`.
    pub roots: Vec<f64>,
    pub root_ses: Vec<f64>,
    /// `Gamma(m (1 - alpha) + 1)^{1/m}`.
    pub gamma_roots: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Single constant with `root <= c * gamma_root` for every `m`.
    pub fitted_c: f64,
    /// Log-log slope of `ratio` against `m`.
    pub growth_exponent: f64,
    pub oracle: Vec<Option<f64>>,
    pub z_scores: Vec<Option<f64>>,
    pub premise: Option<PremiseCheck>,
    pub ensemble: Ensemble,
    pub warnings: Vec<String>,
}

/// Running-supremum moments of a catalog process against the `Gamma(m (1 - alpha) + 1)`
/// growth.
pub fn jn_amplification(
    process: &JnProcess,
    alpha: f64,
    control: &ControlFunction,
    s: f64,
    t: f64,
    m_list: &[f64],
    ensemble: &Ensemble,
    backend: Backend,
) -> Result<JnReport> {
    check_m_list(m_list)?;
    if !(0.0 < alpha && alpha <= 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    if let JnProcess::GradientAverage { field } = process {
        check_scalar(field, "the gradient-average process")?;
        if !field.is_smooth() {
            return Err(Error::Precondition("gradient-average process needs a smooth field".into()));
        }
    }
    let (i, j) = ensemble.indices(&[(s, t)])?[0];
    let sups = ensemble.samples(1, backend, |path| {
        let v: Vec<f64> = match process {
            JnProcess::Zero => vec![0.0; path.len()],
            JnProcess::Brownian { scale } => path.values().iter().map(|w| scale * w).collect(),
            JnProcess::GradientAverage { field } => cumulative_gradient_1d(field, path)?,
        };
        Ok(vec![v[i..=j].iter().map(|x| (x - v[i]).abs()).fold(0.0, f64::max)])
    })?;
    let sups: Vec<f64> = sups.into_iter().map(|v| v[0]).collect();
    let mut roots = Vec::new();
    let mut root_ses = Vec::new();
    let mut gamma_roots = Vec::new();
    let mut oracle = Vec::new();
    let mut z_scores = Vec::new();
    let mut warnings = Vec::new();
    for &m in m_list {
        let (root, se) = root_moment(&sups, m);
        let g = gamma_root(m, 1.0 - alpha);
        let o = match process {
            JnProcess::Brownian { scale } => Some(scale.abs() * brownian_sup_moment(m, t - s).powf(1.0 / m)),
            JnProcess::Zero => Some(0.0),
            JnProcess::GradientAverage { .. } => None,
        };
        let z = o.map(|o| {
            if se > 0.0 {
                (root - o) / se
            } else if root == o {
                0.0
            } else {
                f64::INFINITY
            }
        });
        if root > 0.0 && se / root > MAX_RELATIVE_SE {
            warnings.push(format!("m = {m}: relative standard error {:.2}", se / root));
        }
        roots.push(root);
        root_ses.push(se);
        gamma_roots.push(g);
        oracle.push(o);
        z_scores.push(z);
    }
    let ratios: Vec<f64> = roots.iter().zip(&gamma_roots).map(|(r, g)| r / g).collect();
    let fitted_c = ratios.iter().copied().fold(0.0, f64::max);
    let growth_exponent = if ratios.iter().all(|r| *r > 0.0) && m_list.len() >= 2 {
        let lm: Vec<f64> = m_list.iter().map(|m| m.ln()).collect();
        let lr: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
        fit_line(&lm, &lr, &[]).map_or(f64::NAN, |f| f.slope)
    } else {
        0.0
    };
    let premise = match process {
        JnProcess::Brownian { scale } => {
            let mean = scale.abs() * (2.0 * (t - s) / std::f64::consts::PI).sqrt();
            let bound = scale.abs() * control.eval(s, t).powf(alpha);
            Some(PremiseCheck {
                mean_abs_increment: mean,
                bound,
                holds: mean <= bound,
            })
        }
        JnProcess::Zero => Some(PremiseCheck {
            mean_abs_increment: 0.0,
            bound: control.eval(s, t).powf(alpha),
            holds: true,
        }),
        JnProcess::GradientAverage { .. } => None,
    };
    Ok(JnReport {
        process: process.clone(),
        alpha,
        s,
        t,
        m_list: m_list.to_vec(),
        roots,
        root_ses,
        gamma_roots,
        ratios,
        fitted_c,
        growth_exponent,
        oracle,
        z_scores,
        premise,
        ensemble: *ensemble,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summability {
    SummableExtrapolated,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummabilityVerdict {
    pub eta: f64,
    pub terms: usize,
    pub partial_sum: f64,
    /// Fitted ratio of the geometric tail.
    pub ratio: Option<f64>,
    /// Extrapolated sum beyond the last term.
    pub tail: Option<f64>,
    pub total: Option<f64>,
    pub verdict: Summability,
    last_term: f64,
}

impl SummabilityVerdict {
    /// Extrapolated sum of the terms after the first `n` (`n >= terms`).
    pub fn tail_after(&self, n: usize) -> Option<f64> {
        let rho = self.ratio?;
        if n < self.terms {
            return None;
        }
        Some(self.last_term * rho.powi((n - self.terms + 1) as i32) / (1.0 - rho))
    }
}

/// Partial sums of `a_n^eta` with a geometric tail fitted on the second half of
/// the sequence. A power-law tail that fits at least as well, or a ratio `>= 1`,
/// leaves the verdict inconclusive; divergence is never claimed.
pub fn summable_check(seq: &[f64], etas: &[f64]) -> Result<Vec<SummabilityVerdict>> {
    if seq.iter().any(|a| !(*a >= 0.0)) {
        return Err(Error::Parameter("summability needs a nonnegative sequence".into()));
    }
    Ok(etas
        .iter()
        .map(|&eta| {
            let terms: Vec<f64> = seq.iter().map(|a| a.powf(eta)).collect();
            let n = terms.len();
            let partial: f64 = terms.iter().sum();
            let start = n.saturating_sub((n / 2).max(3));
            let tail = &terms[start..];
            let mut v = SummabilityVerdict {
                eta,
                terms: n,
                partial_sum: partial,
                ratio: None,
                tail: None,
                total: None,
                verdict: Summability::Inconclusive,
                last_term: terms.last().copied().unwrap_or(0.0),
            };
            if tail.len() >= 3 && tail.iter().all(|a| *a == 0.0) {
                v.ratio = Some(0.0);
                v.tail = Some(0.0);
                v.total = Some(partial);
                v.verdict = Summability::SummableExtrapolated;
                return v;
            }
            if tail.len() < 3 || tail.iter().any(|a| *a <= 0.0) {
                return v;
            }
            let pos: Vec<f64> = (start..n).map(|j| (j + 1) as f64).collect();
            let logs: Vec<f64> = tail.iter().map(|a| a.ln()).collect();
            let lpos: Vec<f64> = pos.iter().map(|p| p.ln()).collect();
            let (Some(geo), Some(pow)) = (fit_line(&pos, &logs, &[]), fit_line(&lpos, &logs, &[])) else {
                return v;
            };
            let rho = geo.slope.exp();
            if rho < 1.0 && geo.r_squared >= 0.98 && geo.r_squared >= pow.r_squared {
                let t = v.last_term * rho / (1.0 - rho);
                v.ratio = Some(rho);
                v.tail = Some(t);
                v.total = Some(partial + t);
                v.verdict = Summability::SummableExtrapolated;
            }
            v
        })
        .collect())
}

/// Start and time grids of the stability flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityGrid {
    pub level: u32,
    pub time_level: u32,
    pub start_level: u32,
    pub lattice: Lattice,
    /// Box half-width of the distance norms.
    pub norm_radius: f64,
    pub norm_options: NormOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub labels: Vec<f64>,
    pub p: Exponent,
    pub q: Exponent,
    pub nu: f64,
    pub condition: StabilityCondition,
    pub distances: Vec<f64>,
    /// `W^{-nu,p}` distances (`d = 1`).
    pub bessel_distances: Option<Vec<f64>>,
    /// `[approximant][seed]` sup-defects.
    pub defects: Vec<Vec<f64>>,
    pub median_defects: Vec<f64>,
    pub defect_ses: Vec<f64>,
    pub slope: f64,
    pub slope_se: f64,
    /// 95% interval of the slope.
    pub slope_ci: (f64, f64),
    pub monotone: bool,
    pub summability: Vec<SummabilityVerdict>,
    pub seeds: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Gaussian mollifications of `b` with the given widths.
pub fn mollified_sequence(b: &DriftField, sigmas: &[f64]) -> Result<Vec<DriftField>> {
    sigmas.iter().map(|&s| crate::fields::mollify(b, s)).collect()
}

/// Sup-distance of the flows of each approximant to the flow of `b` over a start
/// and spatial grid, per path seed, against the distance of the drifts.
#[allow(clippy::too_many_arguments)]
pub fn stability_experiment(
    b: &DriftField,
    approximants: &[DriftField],
    labels: &[f64],
    nu: f64,
    seeds: &[u64],
    horizon: f64,
    grid: &StabilityGrid,
    backend: Backend,
) -> Result<StabilityReport> {
    check_scalar(b, "the stability experiment")?;
    let condition = stability_condition(b.p, b.q, b.dim, nu)?;
    if approximants.len() != labels.len() || approximants.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("need one label per approximant and at least one seed".into()));
    }
    let spec = FlowSpec {
        level: grid.level,
        time_level: grid.time_level,
        start_level: grid.start_level,
        lattice: grid.lattice,
        bands: Bands::Full,
        scheme: Scheme::NonlinearYoung,
    };
    let mut defects = vec![Vec::with_capacity(seeds.len()); approximants.len()];
    for &seed in seeds {
        let path = generate_path(seed, horizon, grid.level, 1)?;
        let reference = build_flow(b, &path, &spec, backend)?;
        for (n, bn) in approximants.iter().enumerate() {
            let flow = build_flow(bn, &path, &spec, backend)?;
            defects[n].push(flow.sup_distance(&reference)?);
        }
    }
    let mut distances = Vec::new();
    let mut bessel = Vec::new();
    for bn in approximants {
        let diff = bn.plus(&b.scaled(-1.0));
        distances.push(lqp_norm(&diff, horizon, grid.norm_radius, b.p, b.q, grid.norm_options)?.value);
        bessel.push(bessel_norm(&diff, horizon, grid.norm_radius, -nu, b.p, b.q, grid.norm_options)?.value);
    }
    let mut median_defects = Vec::new();
    let mut defect_ses = Vec::new();
    for d in &defects {
        let mut v = d.clone();
        median_defects.push(median(&mut v));
        defect_ses.push(if d.len() > 1 { Moments::from_slice(d).std_error() } else { 0.0 });
    }
    let mut warnings = Vec::new();
    let monotone = (1..median_defects.len()).all(|n| {
        let tol = 2.0 * (defect_ses[n].powi(2) + defect_ses[n - 1].powi(2)).sqrt();
        median_defects[n] <= median_defects[n - 1] + tol
    });
    let fit = log_fit(&distances, &median_defects, &defect_ses);
    if fit.is_none() {
        warnings.push("defects vanish or distances coincide; no slope fitted".into());
    }
    let (slope, slope_se) = fit.map_or((f64::NAN, f64::NAN), |f| (f.slope, f.slope_se));
    let summability = summable_check(&distances, &[1.0])?;
    Ok(StabilityReport {
        labels: labels.to_vec(),
        p: b.p,
        q: b.q,
        nu,
        condition,
        distances,
        bessel_distances: Some(bessel),
        defects,
        median_defects,
        defect_ses,
        slope,
        slope_se,
        slope_ci: (slope - 1.96 * slope_se, slope + 1.96 * slope_se),
        monotone,
        summability,
        seeds: seeds.to_vec(),
        warnings,
    })
}

/// Parameters of the cross-scheme uniqueness certificate for one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSetup {
    pub x0: f64,
    /// Solver level of both schemes.
    pub level: u32,
    /// Level of the start grid, also used as stored time grid.
    pub start_level: u32,
    pub lattice_step: f64,
    /// Lattice points kept on each side of the solution.
    pub margin: usize,
    pub kappa: f64,
    pub beta: f64,
    pub control: ControlFunction,
    pub thresholds: CertificateThresholds,
}

/// Solve with Euler-Maruyama, optionally add a jump `(time, size)` to the
/// solution, and certify it against the nonlinear Young flow on bands around it.
pub fn certify_path(
    b: &DriftField,
    path: &BrownianPath,
    setup: &CertificateSetup,
    corruption: Option<(f64, f64)>,
    backend: Backend,
) -> Result<UniquenessReport> {
    let mut y = solve_em(b, path, 0, &[setup.x0], setup.level)?;
    if let Some((at, jump)) = corruption {
        for (k, &t) in y.times.iter().enumerate() {
            if t >= at {
                y.values[k] += jump;
            }
        }
    }
    let (lo, hi) = y
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let step = setup.lattice_step;
    let origin = ((lo - 1.0) / step).floor() * step;
    let count = (((hi + 1.0 - origin) / step).ceil() as usize) + 1;
    let lattice = Lattice::new(origin, step, count)?;
    let stride = 1usize << (setup.level - setup.start_level);
    let centers: Vec<f64> = (0..=(1usize << setup.start_level)).map(|a| y.scalar(a * stride)).collect();
    let spec = FlowSpec {
        level: setup.level,
        time_level: setup.start_level,
        start_level: setup.start_level,
        lattice,
        bands: Bands::Windows(bands_around(&lattice, &centers, setup.margin)),
        scheme: Scheme::NonlinearYoung,
    };
    let flow = build_flow(b, path, &spec, backend)?;
    uniqueness_certificate(&y, &flow, &setup.control, setup.kappa, setup.beta, setup.thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicBranch {
    pub horizon: f64,
    pub level: u32,
    /// Largest `|y_t - int_0^t b(y_r) dr|` over the grid for `y = 0`.
    pub residual_zero: f64,
    /// The same for `y = t^2`.
    pub residual_square: f64,
    pub tolerance: f64,
    /// `sup |t^2 - 0|`.
    pub separation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizationReport {
    pub deterministic: DeterministicBranch,
    pub levels: Vec<u32>,
    pub seeds: Vec<u64>,
    /// `[level][seed]` sup-distance between Euler-Maruyama and nonlinear Young.
    pub discrepancies: Vec<Vec<f64>>,
    pub median_discrepancy: Vec<f64>,
    pub decreasing: bool,
    pub certificates: Vec<Option<bool>>,
    pub certificate_pass_rate: Option<f64>,
    pub pass: bool,
}

/// Two solutions of `y' = 2 sign(y) sqrt|y|` from 0 without noise, and the
/// agreement of two schemes along Brownian paths.
pub fn regularization_demo(
    seeds: &[u64],
    levels: &[u32],
    horizon: f64,
    certificate: Option<&CertificateSetup>,
    backend: Backend,
) -> Result<RegularizationReport> {
    if levels.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("need at least one seed and one level".into()));
    }
    if !(horizon > 0.0 && horizon <= 1.0) {
        return Err(Error::Parameter(format!("horizon must lie in (0, 1], got {horizon}")));
    }
    let b = DriftField::new(DriftSpec::SqrtBranch, 1, Exponent(4.0), Exponent(4.0))?;
    let top = *levels.iter().max().unwrap();
    let grid = crate::paths::DyadicGrid::new(horizon, top)?;
    let h = grid.step();
    let residual = |y: &dyn Fn(f64) -> f64| {
        let mut acc = 0.0;
        let mut worst = (y(0.0) - acc).abs();
        for k in 1..grid.len() {
            let (a, c) = (grid.time(k - 1), grid.time(k));
            acc += 0.5 * h * (b.eval1(a, y(a)) + b.eval1(c, y(c)));
            worst = worst.max((y(c) - acc).abs());
        }
        worst
    };
    let tolerance = 1e-12;
    let residual_zero = residual(&|_| 0.0);
    let residual_square = residual(&|t| t * t);
    let deterministic = DeterministicBranch {
        horizon,
        level: top,
        residual_zero,
        residual_square,
        tolerance,
        separation: horizon * horizon,
        pass: residual_zero <= tolerance && residual_square <= tolerance && horizon * horizon > 0.0,
    };
    let per_seed = backend.try_map(seeds.len(), |i| -> Result<(Vec<f64>, Option<bool>)> {
        let path = generate_path(seeds[i], horizon, top, 1)?;
        let mut out = Vec::with_capacity(levels.len());
        for &level in levels {
            let em = solve_em(&b, &path, 0, &[0.0], level)?;
            let ny = solve_nonlinear_young(&b, &path, &[0.0], level, None)?;
            out.push(em.sup_distance(&ny)?);
        }
        let cert = match certificate {
            Some(setup) => Some(certify_path(&b, &path, setup, None, Backend::Sequential)?.pass),
            None => None,
        };
        Ok((out, cert))
    })?;
    let discrepancies: Vec<Vec<f64>> = (0..levels.len())
        .map(|l| per_seed.iter().map(|(d, _)| d[l]).collect())
        .collect();
    let median_discrepancy: Vec<f64> = discrepancies.iter().map(|d| median(&mut d.clone())).collect();
    let decreasing = median_discrepancy.windows(2).all(|w| w[1] < w[0]);
    let certificates: Vec<Option<bool>> = per_seed.iter().map(|(_, c)| *c).collect();
    let certificate_pass_rate = certificate.map(|_| {
        certificates.iter().filter(|c| **c == Some(true)).count() as f64 / seeds.len() as f64
    });
    Ok(RegularizationReport {
        pass: deterministic.pass && decreasing,
        deterministic,
        levels: levels.to_vec(),
        seeds: seeds.to_vec(),
        discrepancies,
        median_discrepancy,
        decreasing,
        certificates,
        certificate_pass_rate,
    })
}

/// Flow of `b` from `x0` restarted at every start of a grid, for the
/// flow-property refinement study: `X^{s_a, Y_{s_a}}` must follow `Y`.
pub fn restart_discrepancy(b: &DriftField, path: &BrownianPath, x0: f64, level: u32, start_level: u32) -> Result<f64> {
    let y = solve_nonlinear_young(b, path, &[x0], level, None)?;
    let stride = 1usize << (level - start_level);
    let mut worst = 0.0f64;
    for a in 1..(1usize << start_level) {
        let start = a * stride;
        let z = solve_nonlinear_young_from(b, path, start, &[y.scalar(start)], level, None)?;
        for k in 0..z.len() {
            worst = worst.max((z.scalar(k) - y.scalar(start + k)).abs());
        }
    }
    Ok(worst)
}
