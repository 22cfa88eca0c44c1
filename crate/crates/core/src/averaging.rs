//! Averaged drift fields `T^W f(s, t, x) = int_s^t f(r, W_r + x) dr` along a fixed
//! path, their empirical Hölder exponents, and the regularizing certificate.
//!
//! All time integrals use the trapezoid rule at path resolution.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::fields::DriftField;
use crate::paths::BrownianPath;
use crate::stats::{fit_line, fit_plane, median};

/// Cap on stored table entries.
pub const TABLE_CAP: usize = 1 << 26;

/// Coefficient of determination below which a fit is flagged.
pub const MIN_R_SQUARED: f64 = 0.95;

fn grid_index(path: &BrownianPath, t: f64, what: &str) -> Result<usize> {
    path.grid()
        .index_of(t)
        .ok_or_else(|| Error::Domain(format!("{what}={t} is not a point of the path grid")))
}

fn interval(path: &BrownianPath, s: f64, t: f64) -> Result<(usize, usize)> {
    let i = grid_index(path, s, "s")?;
    let j = grid_index(path, t, "t")?;
    if i > j {
        return Err(Error::Domain(format!("need s <= t, got s={s}, t={t}")));
    }
    Ok((i, j))
}

/// Trapezoid sum of `g(k)` over path indices `i..=j` with step `h`.
#[inline]
fn trapezoid_indices<G: FnMut(usize) -> f64>(i: usize, j: usize, h: f64, mut g: G) -> f64 {
    if i == j {
        return 0.0;
    }
    let mut s = 0.5 * (g(i) + g(j));
    for k in i + 1..j {
        s += g(k);
    }
    s * h
}

/// `int_s^t f(r, W_r + x) dr`; `s`, `t` must be grid points.
pub fn average_field(f: &DriftField, path: &BrownianPath, s: f64, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let (i, j) = interval(path, s, t)?;
    average_indices(f, path, i, j, x)
}

/// [`average_field`] over grid indices.
pub fn average_indices(f: &DriftField, path: &BrownianPath, i: usize, j: usize, x: &[f64]) -> Result<Vec<f64>> {
    let d = path.dim();
    if x.len() != d || f.dim != d {
        return Err(Error::Incompatible(format!(
            "field dim {}, path dim {d}, point dim {}",
            f.dim,
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite spatial point {x:?}")));
    }
    let h = path.grid().step();
    let mut acc = vec![0.0; d];
    let mut point = vec![0.0; d];
    let mut value = vec![0.0; d];
    for k in i..=j {
        if i == j {
            break;
        }
        let w = if k == i || k == j { 0.5 } else { 1.0 };
        let t = path.grid().time(k);
        for (c, p) in point.iter_mut().enumerate() {
            *p = path.point(k)[c] + x[c];
        }
        f.try_eval_into(t, &point, &mut value)?;
        acc.iter_mut().zip(&value).for_each(|(a, v)| *a += w * v);
    }
    acc.iter_mut().for_each(|a| *a *= h);
    Ok(acc)
}

/// Scalar `d = 1` average over grid indices, without per-point checks.
#[inline]
pub fn average_indices_1d(f: &DriftField, path: &BrownianPath, i: usize, j: usize, x: f64) -> f64 {
    let grid = path.grid();
    trapezoid_indices(i, j, grid.step(), |k| f.eval1(grid.time(k), path.scalar(k) + x))
}

/// Running integrals `int_0^{t_k} f(r, W_r + x) dr` for every grid index `k` (`d = 1`).
pub fn cumulative_average_1d(f: &DriftField, path: &BrownianPath, x: f64) -> Vec<f64> {
    let grid = path.grid();
    let h = grid.step();
    let mut out = Vec::with_capacity(path.len());
    let mut acc = 0.0;
    let mut prev = f.eval1(0.0, path.scalar(0) + x);
    out.push(0.0);
    for k in 1..path.len() {
        let cur = f.eval1(grid.time(k), path.scalar(k) + x);
        acc += 0.5 * h * (prev + cur);
        out.push(acc);
        prev = cur;
    }
    out
}

/// Change of the average when the path is coarsened by one level; `s`, `t` must
/// lie on the coarse grid.
pub fn quadrature_increment(f: &DriftField, path: &BrownianPath, s: f64, t: f64, x: &[f64]) -> Result<f64> {
    let fine = average_field(f, path, s, t, x)?;
    let coarse = average_field(f, &path.coarsen()?, s, t, x)?;
    Ok(fine
        .iter()
        .zip(&coarse)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// `V_t - V_s = int_s^t grad f_1(r, W_r) dr`, the gradient taken of the first component.
pub fn gradient_average(f: &DriftField, path: &BrownianPath, s: f64, t: f64) -> Result<Vec<f64>> {
    let (i, j) = interval(path, s, t)?;
    if !f.is_smooth() {
        return Err(Error::Precondition(format!(
            "gradient of a non-smooth drift {}; mollify it first",
            f.name()
        )));
    }
    let d = path.dim();
    if f.dim != d {
        return Err(Error::Incompatible(format!("field dim {}, path dim {d}", f.dim)));
    }
    let grid = path.grid();
    if d == 1 {
        let v = trapezoid_indices(i, j, grid.step(), |k| f.gradient1_unchecked(grid.time(k), path.scalar(k)));
        return Ok(vec![v]);
    }
    let mut acc = vec![0.0; d];
    let mut g = vec![0.0; d];
    for k in i..=j {
        if i == j {
            break;
        }
        let w = if k == i || k == j { 0.5 } else { 1.0 };
        f.gradient_into(grid.time(k), path.point(k), &mut g)?;
        acc.iter_mut().zip(&g).for_each(|(a, v)| *a += w * v);
    }
    acc.iter_mut().for_each(|a| *a *= grid.step());
    Ok(acc)
}

/// Running gradient averages `V_{t_k}` for every grid index (`d = 1`).
pub fn cumulative_gradient_1d(f: &DriftField, path: &BrownianPath) -> Result<Vec<f64>> {
    if !f.is_smooth() || f.dim != 1 {
        return Err(Error::Precondition("cumulative gradient needs a smooth d = 1 field".into()));
    }
    let grid = path.grid();
    let h = grid.step();
    let mut out = Vec::with_capacity(path.len());
    let mut acc = 0.0;
    let mut prev = f.gradient1_unchecked(0.0, path.scalar(0));
    out.push(0.0);
    for k in 1..path.len() {
        let cur = f.gradient1_unchecked(grid.time(k), path.scalar(k));
        acc += 0.5 * h * (prev + cur);
        out.push(acc);
        prev = cur;
    }
    Ok(out)
}

/// Tabulated averages over a dyadic time grid and a list of spatial points.
///
/// Stores the running integral from 0 at every time-grid point, so that
/// `value(s, t, x) = C(t, x) - C(s, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedField {
    pub field: String,
    pub path: String,
    pub path_level: u32,
    pub time_level: u32,
    pub horizon: f64,
    pub dim: usize,
    /// Half-width of the compact box `K = [-r, r]^d`.
    pub radius: f64,
    pub xs: Vec<Vec<f64>>,
    /// Layout `[x][time][component]`.
    cumulative: Vec<f64>,
}

impl AveragedField {
    pub fn time_points(&self) -> usize {
        (1usize << self.time_level) + 1
    }

    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / (1usize << self.time_level) as f64
    }

    /// First component of `T^W f(t_a, t_b, x_i)` for time-grid indices `a <= b`.
    #[inline]
    pub fn value(&self, a: usize, b: usize, i: usize) -> f64 {
        self.value_component(a, b, i, 0)
    }

    pub fn value_component(&self, a: usize, b: usize, i: usize, c: usize) -> f64 {
        let nt = self.time_points();
        let d = self.dim;
        self.cumulative[(i * nt + b) * d + c] - self.cumulative[(i * nt + a) * d + c]
    }

    /// Same table with every entry multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.cumulative.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// CSV rows `s,t,x...,value...` over the dyadic intervals of every scale.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.dim;
        let mut header = vec!["s".to_string(), "t".to_string()];
        header.extend((1..=d).map(|c| format!("x{c}")));
        if d == 1 {
            header.push("value".into());
        } else {
            header.extend((1..=d).map(|c| format!("value{c}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for (a, b) in dyadic_pairs(self.time_level) {
            for (i, x) in self.xs.iter().enumerate() {
                let mut row = vec![fmt(self.time(a)), fmt(self.time(b))];
                row.extend(x.iter().map(|v| fmt(*v)));
                row.extend((0..d).map(|c| fmt(self.value_component(a, b, i, c))));
                writeln!(w, "{}", row.join(","))?;
            }
        }
        Ok(())
    }
}

pub(crate) fn fmt(v: f64) -> String {
    format!("{v:e}")
}

/// Index pairs `(k 2^j, (k + 1) 2^j)` of all dyadic intervals of a level-`level` grid.
pub fn dyadic_pairs(level: u32) -> Vec<(usize, usize)> {
    let n = 1usize << level;
    let mut out = Vec::new();
    let mut len = 1;
    while len <= n {
        let mut a = 0;
        while a + len <= n {
            out.push((a, a + len));
            a += len;
        }
        len *= 2;
    }
    out
}

/// Tabulate `T^W f` over the time grid of level `time_level` and the points `xs`.
pub fn build_averaged_table(
    f: &DriftField,
    path: &BrownianPath,
    radius: f64,
    time_level: u32,
    xs: &[Vec<f64>],
    backend: Backend,
) -> Result<AveragedField> {
    if time_level > path.level() {
        return Err(Error::Parameter(format!(
            "time level {time_level} exceeds path level {}",
            path.level()
        )));
    }
    let d = path.dim();
    if f.dim != d {
        return Err(Error::Incompatible(format!("field dim {}, path dim {d}", f.dim)));
    }
    for x in xs {
        if x.len() != d || x.iter().any(|v| !(v.abs() <= radius)) {
            return Err(Error::Domain(format!("grid point {x:?} outside K = [-{radius}, {radius}]^{d}")));
        }
    }
    let nt = (1usize << time_level) + 1;
    let entries = nt as u128 * xs.len() as u128 * d as u128;
    if entries > TABLE_CAP as u128 {
        return Err(Error::Resource {
            what: "averaged table entries",
            requested: entries,
            cap: TABLE_CAP as u128,
        });
    }
    let stride = 1usize << (path.level() - time_level);
    let columns = backend.try_map(xs.len(), |i| -> Result<Vec<f64>> {
        let x = &xs[i];
        let mut col = Vec::with_capacity(nt * d);
        if d == 1 {
            let cum = cumulative_average_1d(f, path, x[0]);
            if let Some(k) = cum.iter().position(|v| !v.is_finite()) {
                return Err(Error::Evaluation {
                    field: f.name(),
                    t: path.grid().time(k),
                    x: x.clone(),
                });
            }
            col.extend((0..nt).map(|a| cum[a * stride]));
        } else {
            let mut acc = vec![0.0; d];
            col.extend_from_slice(&acc);
            for a in 1..nt {
                let seg = average_indices(f, path, (a - 1) * stride, a * stride, x)?;
                acc.iter_mut().zip(&seg).for_each(|(s, v)| *s += v);
                col.extend_from_slice(&acc);
            }
        }
        Ok(col)
    })?;
    Ok(AveragedField {
        field: f.name(),
        path: path.id(),
        path_level: path.level(),
        time_level,
        horizon: path.grid().horizon(),
        dim: d,
        radius,
        xs: xs.to_vec(),
        cumulative: columns.concat(),
    })
}

/// Uniform one-dimensional grid of `2^level + 1` points on `[-radius, radius]`.
pub fn uniform_points(radius: f64, level: u32) -> Vec<Vec<f64>> {
    let n = 1usize << level;
    (0..=n)
        .map(|k| vec![-radius + 2.0 * radius * k as f64 / n as f64])
        .collect()
}

/// One increment observation: `|Delta|` over a time span `dt` and spatial gap `dx`
/// (`dx = 0` for the plain averaged value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementSample {
    pub dt: f64,
    pub dx: f64,
    pub delta: f64,
}

/// Tuple at which the empirical constant is attained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Argmax {
    pub s: f64,
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub alpha_target: f64,
    pub epsilon_target: f64,
    /// Fitted time exponent.
    pub alpha_hat: Option<f64>,
    /// Fitted spatial exponent; `None` when spatially flat.
    pub gamma_hat: Option<f64>,
    pub xi: f64,
    /// Largest ratio from the plain values, `|T f(s,t,x)| / (t-s)^alpha`.
    pub xi_bounded: f64,
    /// Largest ratio from spatial differences.
    pub xi_lipschitz: f64,
    pub radius: f64,
    pub time_r_squared: Option<f64>,
    pub space_r_squared: Option<f64>,
    pub max_residual: f64,
    pub spatially_flat: bool,
    pub flags: Vec<String>,
    pub argmax: Option<Argmax>,
    pub pass: bool,
}

fn bucket_key(v: f64) -> i64 {
    (v.log2() * 1e6).round() as i64
}

/// Fit exponents and the empirical constant from raw increment samples.
pub fn fit_increments(samples: &[IncrementSample], alpha: f64, epsilon: f64, noise_floor: f64) -> HolderReport {
    let mut flags = Vec::new();
    let mut xi_bounded = 0.0f64;
    let mut xi_lipschitz = 0.0f64;
    let mut time_buckets: BTreeMap<i64, (f64, Vec<f64>)> = BTreeMap::new();
    let mut space_buckets: BTreeMap<(i64, i64), (f64, f64, Vec<f64>)> = BTreeMap::new();
    let mut max_diff = 0.0f64;
    for s in samples {
        if !(s.dt > 0.0) {
            continue;
        }
        if s.dx == 0.0 {
            xi_bounded = xi_bounded.max(s.delta.abs() / s.dt.powf(alpha));
            time_buckets
                .entry(bucket_key(s.dt))
                .or_insert((s.dt, Vec::new()))
                .1
                .push(s.delta.abs());
        } else {
            max_diff = max_diff.max(s.delta.abs());
            xi_lipschitz = xi_lipschitz.max(s.delta.abs() / (s.dx.powf(1.0 - epsilon) * s.dt.powf(alpha)));
            space_buckets
                .entry((bucket_key(s.dt), bucket_key(s.dx)))
                .or_insert((s.dt, s.dx, Vec::new()))
                .2
                .push(s.delta.abs());
        }
    }
    let spatially_flat = !space_buckets.is_empty() && max_diff <= noise_floor;
    if spatially_flat {
        flags.push("spatially-flat".into());
    }

    let mut max_residual = 0.0f64;
    let (mut alpha_hat, mut time_r2) = (None, None);
    {
        let (mut lx, mut ly) = (Vec::new(), Vec::new());
        for (_, (dt, mut v)) in time_buckets {
            let m = median(&mut v);
            if m > noise_floor {
                lx.push(dt.ln());
                ly.push(m.ln());
            }
        }
        if let Some(fit) = fit_line(&lx, &ly, &[]) {
            alpha_hat = Some(fit.slope);
            time_r2 = Some(fit.r_squared);
            max_residual = max_residual.max(fit.max_residual);
        }
    }
    let (mut gamma_hat, mut space_r2) = (None, None);
    if !spatially_flat {
        let (mut us, mut vs, mut ys) = (Vec::new(), Vec::new(), Vec::new());
        for (_, (dt, dx, mut v)) in space_buckets {
            let m = median(&mut v);
            if m > noise_floor {
                us.push(dt.ln());
                vs.push(dx.ln());
                ys.push(m.ln());
            }
        }
        let distinct_dt = {
            let mut u = us.clone();
            u.sort_by(f64::total_cmp);
            u.dedup();
            u.len()
        };
        if distinct_dt >= 2 {
            if let Some((_, a, b, r2)) = fit_plane(&us, &vs, &ys) {
                gamma_hat = Some(b);
                space_r2 = Some(r2);
                if alpha_hat.is_none() {
                    alpha_hat = Some(a);
                    time_r2 = Some(r2);
                }
            }
        } else if let Some(fit) = fit_line(&vs, &ys, &[]) {
            gamma_hat = Some(fit.slope);
            space_r2 = Some(fit.r_squared);
            max_residual = max_residual.max(fit.max_residual);
        }
    }
    for (name, r2) in [("time", time_r2), ("space", space_r2)] {
        if let Some(r2) = r2 {
            if r2 < MIN_R_SQUARED {
                flags.push(format!("{name} fit R^2 = {r2:.3} below {MIN_R_SQUARED}"));
            }
        }
    }
    let xi = xi_bounded.max(xi_lipschitz);
    let diagnostics_ok = time_r2.is_none_or(|r| r >= MIN_R_SQUARED) && space_r2.is_none_or(|r| r >= MIN_R_SQUARED);
    HolderReport {
        alpha_target: alpha,
        epsilon_target: epsilon,
        alpha_hat,
        gamma_hat,
        xi,
        xi_bounded,
        xi_lipschitz,
        radius: f64::NAN,
        time_r_squared: time_r2,
        space_r_squared: space_r2,
        max_residual,
        spatially_flat,
        flags,
        argmax: None,
        pass: xi.is_finite() && diagnostics_ok,
    }
}

/// Exponents and empirical `Xi` of a table over all dyadic intervals and all
/// spatial separations `2^j` grid cells apart. Each interval contributes the
/// sup over the grid of the value and of each separation's difference; the
/// fits run on medians of these sups over intervals of equal length.
pub fn estimate_holder(table: &AveragedField, alpha: f64, epsilon: f64) -> Result<HolderReport> {
    let pairs = dyadic_pairs(table.time_level);
    if table.time_level < 7 {
        return Err(Error::Precondition(format!(
            "need at least 8 dyadic time scales, table has {}",
            table.time_level + 1
        )));
    }
    let nx = table.xs.len();
    let mut seps = Vec::new();
    let mut step = 1;
    while step < nx {
        seps.push(step);
        step *= 2;
    }
    if seps.len() < 8 {
        return Err(Error::Precondition(format!(
            "need at least 8 spatial separations, grid gives {}",
            seps.len()
        )));
    }
    let dist = |i: usize, j: usize| -> f64 {
        table.xs[i]
            .iter()
            .zip(&table.xs[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    // one sample per interval and separation: the sup over x
    let mut samples = Vec::with_capacity(pairs.len() * (1 + seps.len()));
    let mut scale = 0.0f64;
    let mut best = (0.0f64, None);
    for &(a, b) in &pairs {
        let dt = table.time(b) - table.time(a);
        let mut plain = 0.0f64;
        let mut by_sep = vec![(0.0f64, 0.0f64); seps.len()];
        for i in 0..nx {
            let v = table.value(a, b, i);
            plain = plain.max(v.abs());
            for (j, &sep) in seps.iter().enumerate() {
                if i + sep >= nx {
                    break;
                }
                let dx = dist(i, i + sep);
                let delta = (v - table.value(a, b, i + sep)).abs();
                if delta >= by_sep[j].1 {
                    by_sep[j] = (dx, delta);
                }
                let ratio = delta / (dx.powf(1.0 - epsilon) * dt.powf(alpha));
                if ratio > best.0 {
                    best = (ratio, Some((a, b, i, i + sep)));
                }
            }
        }
        scale = scale.max(plain);
        samples.push(IncrementSample { dt, dx: 0.0, delta: plain });
        for (j, &(dx, delta)) in by_sep.iter().enumerate() {
            let dx = if dx > 0.0 { dx } else { dist(0, seps[j]) };
            samples.push(IncrementSample { dt, dx, delta });
        }
    }
    let noise_floor = 1e-13 * scale.max(f64::MIN_POSITIVE);
    let mut report = fit_increments(&samples, alpha, epsilon, noise_floor);
    report.radius = table.radius;
    report.argmax = best.1.map(|(a, b, i, j)| Argmax {
        s: table.time(a),
        t: table.time(b),
        x: table.xs[i].clone(),
        y: table.xs[j].clone(),
    });
    Ok(report)
}

/// A perturbation `psi: [0, T] -> K` sampled on a path grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub label: String,
    /// Row-major `(grid points) x d`.
    pub values: Vec<f64>,
    pub dim: usize,
}

impl Perturbation {
    /// Piecewise constant: `values[i]` on `[jumps[i-1], jumps[i])`, right-continuous.
    pub fn staircase(path: &BrownianPath, jumps: &[f64], levels: &[Vec<f64>]) -> Result<Self> {
        if levels.len() != jumps.len() + 1 {
            return Err(Error::Parameter("staircase needs one more level than jumps".into()));
        }
        let d = path.dim();
        let mut values = Vec::with_capacity(path.len() * d);
        for k in 0..path.len() {
            let t = path.grid().time(k);
            let piece = jumps.iter().filter(|&&u| u <= t).count();
            values.extend_from_slice(&levels[piece]);
        }
        Ok(Self {
            label: format!("staircase{jumps:?}"),
            values,
            dim: d,
        })
    }

    /// Piecewise linear through `(knots[i], levels[i])`, constant outside the knots.
    pub fn piecewise_linear(path: &BrownianPath, knots: &[f64], levels: &[Vec<f64>]) -> Result<Self> {
        if knots.len() != levels.len() || knots.is_empty() {
            return Err(Error::Parameter("piecewise-linear needs matching non-empty knots and levels".into()));
        }
        let d = path.dim();
        let mut values = Vec::with_capacity(path.len() * d);
        for k in 0..path.len() {
            let t = path.grid().time(k);
            let seg = knots.iter().filter(|&&u| u <= t).count();
            if seg == 0 {
                values.extend_from_slice(&levels[0]);
            } else if seg == knots.len() {
                values.extend_from_slice(&levels[seg - 1]);
            } else {
                let lam = (t - knots[seg - 1]) / (knots[seg] - knots[seg - 1]);
                values.extend(
                    levels[seg - 1]
                        .iter()
                        .zip(&levels[seg])
                        .map(|(a, b)| a + lam * (b - a)),
                );
            }
        }
        Ok(Self {
            label: format!("linear{knots:?}"),
            values,
            dim: d,
        })
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Grid variation over indices `i..=j`.
    pub fn variation(&self, i: usize, j: usize) -> f64 {
        (i..j)
            .map(|k| {
                self.at(k)
                    .iter()
                    .zip(self.at(k + 1))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResult {
    pub label: String,
    pub xi: f64,
    pub variation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizingReport {
    pub alpha: f64,
    pub epsilon: f64,
    /// Exponent of the control `eta(s, t) = t - s`.
    pub eta_exponent: f64,
    pub time_level: u32,
    pub xi: f64,
    pub per_perturbation: Vec<PerturbationResult>,
    pub pass: bool,
}

/// Smallest `Xi` with `|int_s^t [f(r, W_r + psi_r) - f(r, W_r + psi_s)] dr|
/// <= Xi [psi]_var^{1-eps} (t-s)^alpha` over the dyadic intervals of `time_level`.
pub fn regularizing_certificate(
    f: &DriftField,
    path: &BrownianPath,
    radius: f64,
    epsilon: f64,
    alpha: f64,
    family: &[Perturbation],
    time_level: u32,
    backend: Backend,
) -> Result<RegularizingReport> {
    if f.dim != 1 || path.dim() != 1 {
        return Err(Error::Unsupported("regularizing certificate is implemented for d = 1".into()));
    }
    if time_level > path.level() {
        return Err(Error::Parameter(format!(
            "time level {time_level} exceeds path level {}",
            path.level()
        )));
    }
    for psi in family {
        if psi.values.len() != path.len() {
            return Err(Error::Incompatible(format!("perturbation {} is not on the path grid", psi.label)));
        }
        if let Some(k) = psi.values.iter().position(|v| !(v.abs() <= radius)) {
            return Err(Error::Domain(format!(
                "perturbation {} leaves K = [-{radius}, {radius}] at t = {}",
                psi.label,
                path.grid().time(k)
            )));
        }
    }
    let stride = 1usize << (path.level() - time_level);
    let pairs = dyadic_pairs(time_level);
    let grid = path.grid();
    let h = grid.step();
    let results = backend.map(family.len(), |n| {
        let psi = &family[n];
        // running integrals of f(r, W_r + psi_r)
        let mut moving = vec![0.0; path.len()];
        let mut prev = f.eval1(0.0, path.scalar(0) + psi.values[0]);
        for k in 1..path.len() {
            let cur = f.eval1(grid.time(k), path.scalar(k) + psi.values[k]);
            moving[k] = moving[k - 1] + 0.5 * h * (prev + cur);
            prev = cur;
        }
        let mut xi = 0.0f64;
        let mut total_var = 0.0f64;
        for &(a, b) in &pairs {
            let (i, j) = (a * stride, b * stride);
            let var = psi.variation(i, j);
            total_var = total_var.max(var);
            if var == 0.0 {
                // psi is constant on [s, t], so the two integrands coincide
                continue;
            }
            let frozen = average_indices_1d(f, path, i, j, psi.values[i]);
            let lhs = (moving[j] - moving[i] - frozen).abs();
            xi = xi.max(lhs / (var.powf(1.0 - epsilon) * (grid.time(j) - grid.time(i)).powf(alpha)));
        }
        PerturbationResult {
            label: psi.label.clone(),
            xi,
            variation: total_var,
        }
    });
    let xi = results.iter().fold(0.0f64, |m, r| m.max(r.xi));
    Ok(RegularizingReport {
        alpha,
        epsilon,
        eta_exponent: 1.0,
        time_level,
        xi,
        per_perturbation: results,
        pass: xi.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_drift, mollify, DriftParams, DriftSpec, Exponent};
    use crate::paths::generate_path;
    use approx::assert_relative_eq;

    fn field(spec: DriftSpec) -> DriftField {
        DriftField::new(spec, 1, Exponent(4.0), Exponent(4.0)).unwrap()
    }

    fn sign_sigma(sigma: f64) -> DriftField {
        mollify(&field(DriftSpec::Sign), sigma).unwrap()
    }

    #[test]
    fn constant_field_averages_exactly() {
        let path = generate_path(3, 1.0, 8, 1).unwrap();
        let f = field(DriftSpec::Constant { value: 1.5 });
        let v = average_field(&f, &path, 0.25, 0.75, &[0.3]).unwrap();
        assert_relative_eq!(v[0], 0.75, epsilon = 1e-14);
        assert_eq!(average_field(&f, &path, 0.5, 0.5, &[0.0]).unwrap()[0], 0.0);
    }

    #[test]
    fn identity_field_is_x_dt_plus_path_trapezoid() {
        let path = generate_path(4, 1.0, 10, 1).unwrap();
        let f = field(DriftSpec::Identity);
        let (s, t, x) = (0.125, 0.875, 0.4);
        let v = average_field(&f, &path, s, t, &[x]).unwrap()[0];
        let (i, j) = (128, 896);
        let h = path.grid().step();
        let mut direct = 0.5 * (path.scalar(i) + path.scalar(j));
        for k in i + 1..j {
            direct += path.scalar(k);
        }
        assert!((v - (x * (t - s) + h * direct)).abs() < 1e-12);
    }

    #[test]
    fn off_grid_times_are_rejected() {
        let path = generate_path(4, 1.0, 4, 1).unwrap();
        let f = field(DriftSpec::Zero);
        assert!(matches!(average_field(&f, &path, 0.1, 0.5, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(average_field(&f, &path, 0.5, 0.25, &[0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn gradient_of_half_square_matches_identity_average() {
        let path = generate_path(9, 1.0, 10, 1).unwrap();
        let g = gradient_average(&field(DriftSpec::HalfSquare { window: 50.0 }), &path, 0.0, 0.5).unwrap();
        let a = average_field(&field(DriftSpec::Identity), &path, 0.0, 0.5, &[0.0]).unwrap();
        assert_relative_eq!(g[0], a[0], epsilon = 1e-14);
        let flat = gradient_average(&field(DriftSpec::Constant { value: 3.0 }), &path, 0.0, 1.0).unwrap();
        assert_eq!(flat[0], 0.0);
        assert!(matches!(
            gradient_average(&field(DriftSpec::Sign), &path, 0.0, 1.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn table_rows_match_pointwise_averages_and_add_up() {
        let path = generate_path(11, 1.0, 10, 1).unwrap();
        let f = sign_sigma(0.1);
        let xs = uniform_points(1.0, 3);
        let table = build_averaged_table(&f, &path, 1.0, 5, &xs, Backend::Parallel).unwrap();
        let mut worst = 0.0f64;
        for i in 0..xs.len() {
            for (a, b) in [(0, 32), (3, 17), (8, 9)] {
                let direct = average_field(&f, &path, table.time(a), table.time(b), &xs[i]).unwrap()[0];
                worst = worst.max((table.value(a, b, i) - direct).abs());
                let split = table.value(a, 12.clamp(a, b), i) + table.value(12.clamp(a, b), b, i);
                assert!((split - table.value(a, b, i)).abs() < 1e-10);
            }
        }
        assert!(worst < 1e-10, "{worst}");
        let zero = build_averaged_table(&field(DriftSpec::Zero), &path, 1.0, 5, &xs, Backend::Sequential).unwrap();
        assert!(zero.cumulative.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn table_build_is_backend_independent() {
        let path = generate_path(12, 1.0, 9, 1).unwrap();
        let f = sign_sigma(0.05);
        let xs = uniform_points(1.0, 4);
        let a = build_averaged_table(&f, &path, 1.0, 6, &xs, Backend::Sequential).unwrap();
        let b = build_averaged_table(&f, &path, 1.0, 6, &xs, Backend::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn points_outside_the_box_are_rejected() {
        let path = generate_path(1, 1.0, 4, 1).unwrap();
        let err = build_averaged_table(&field(DriftSpec::Zero), &path, 0.5, 2, &[vec![0.7]], Backend::Sequential);
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn synthetic_increments_recover_exponents() {
        let mut samples = Vec::new();
        for j in 0..10 {
            for k in 0..10 {
                let dt = 2f64.powi(-j);
                let dx = 2f64.powi(-k);
                samples.push(IncrementSample {
                    dt,
                    dx,
                    delta: dt.powf(0.3) * dx.powf(0.9),
                });
            }
        }
        let r = fit_increments(&samples, 0.3, 0.1, 0.0);
        assert!((r.alpha_hat.unwrap() - 0.3).abs() < 0.02);
        assert!((r.gamma_hat.unwrap() - 0.9).abs() < 0.02);
        assert_relative_eq!(r.xi, 1.0, epsilon = 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn constant_field_is_spatially_flat_with_unit_time_exponent() {
        let path = generate_path(5, 1.0, 10, 1).unwrap();
        let table = build_averaged_table(
            &field(DriftSpec::Constant { value: 2.0 }),
            &path,
            1.0,
            8,
            &uniform_points(1.0, 8),
            Backend::Parallel,
        )
        .unwrap();
        let r = estimate_holder(&table, 0.5, 0.1).unwrap();
        assert!(r.spatially_flat);
        assert!(r.gamma_hat.is_none());
        assert!((r.alpha_hat.unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn holder_constant_scales_and_is_subadditive() {
        let path = generate_path(6, 1.0, 10, 1).unwrap();
        let xs = uniform_points(1.0, 8);
        let f = sign_sigma(2f64.powi(-4));
        let g = mollify(&make_drift("gaussian_bump", &DriftParams { width: Some(0.2), ..Default::default() }).unwrap(), 0.05).unwrap();
        let tf = build_averaged_table(&f, &path, 1.0, 8, &xs, Backend::Parallel).unwrap();
        let tg = build_averaged_table(&g, &path, 1.0, 8, &xs, Backend::Parallel).unwrap();
        let tfg = build_averaged_table(&f.plus(&g), &path, 1.0, 8, &xs, Backend::Parallel).unwrap();
        let (a, e) = (0.1, 0.1);
        let xf = estimate_holder(&tf, a, e).unwrap().xi;
        let xg = estimate_holder(&tg, a, e).unwrap().xi;
        let xfg = estimate_holder(&tfg, a, e).unwrap().xi;
        assert!(xfg <= xf + xg + 1e-9);
        let x2 = estimate_holder(&tf.scaled(2.0), a, e).unwrap().xi;
        assert_relative_eq!(x2, 2.0 * xf, max_relative = 1e-12);
    }

    #[test]
    fn constant_perturbations_give_zero_left_side() {
        let path = generate_path(8, 1.0, 10, 1).unwrap();
        let psi = Perturbation::staircase(&path, &[], &[vec![0.3]]).unwrap();
        let r = regularizing_certificate(&sign_sigma(0.1), &path, 1.0, 0.1, 0.1, &[psi.clone()], 8, Backend::Sequential)
            .unwrap();
        assert_eq!(r.xi, 0.0);
        let c = field(DriftSpec::Constant { value: 1.0 });
        let wiggly = Perturbation::piecewise_linear(&path, &[0.0, 0.5, 1.0], &[vec![0.0], vec![0.8], vec![-0.5]]).unwrap();
        let r = regularizing_certificate(&c, &path, 1.0, 0.1, 0.1, &[wiggly], 8, Backend::Sequential).unwrap();
        // rounding only: the two running sums are accumulated differently
        assert!(r.xi < 1e-12, "{}", r.xi);
        let escaping = Perturbation::staircase(&path, &[0.5], &[vec![0.0], vec![1.5]]).unwrap();
        assert!(matches!(
            regularizing_certificate(&c, &path, 1.0, 0.1, 0.1, &[escaping], 8, Backend::Sequential),
            Err(Error::Domain(_))
        ));
    }
}
