//! Discrete semiflows `X^{s,x}_t` over dyadic `(s, x)` grids for `d = 1`: flow
//! property and spatial regularity checks, gluing, and the uniqueness certificate.
//!
//! Each row stores the drift displacement `D^{s,x}_t = X^{s,x}_t - x - (W_t - W_s)`,
//! accumulated from the solver's per-step drift integrals.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::averaging::fmt;
use crate::error::{Error, Result};
use crate::exec::Backend;
use crate::fields::DriftField;
use crate::paths::BrownianPath;
use crate::sewing::{solve_euler_from, solve_nonlinear_young_from, ControlFunction, Scheme, SolutionPath};
use crate::stats::fit_line;

/// Cap on stored flow entries.
pub const FLOW_CAP: usize = 1 << 27;

const FLOW_MAGIC: &[u8; 4] = b"RNFL";

/// Euler-Maruyama solution from grid index `start` of a level-`level` grid.
pub fn solve_em(b: &DriftField, path: &BrownianPath, start: usize, x: &[f64], level: u32) -> Result<SolutionPath> {
    solve_euler_from(b, path, start, x, level, None)
}

/// Spatial lattice `x_k = origin + k step`, `k = 0..count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub origin: f64,
    pub step: f64,
    pub count: usize,
}

impl Lattice {
    pub fn new(origin: f64, step: f64, count: usize) -> Result<Self> {
        if !(step > 0.0 && origin.is_finite() && count >= 2) {
            return Err(Error::Parameter(format!(
                "lattice needs step > 0 and at least 2 points, got step={step}, count={count}"
            )));
        }
        Ok(Self { origin, step, count })
    }

    /// `2^level + 1` points on `[-radius, radius]`.
    pub fn symmetric(radius: f64, level: u32) -> Result<Self> {
        let n = 1usize << level;
        Self::new(-radius, 2.0 * radius / n as f64, n + 1)
    }

    /// About `2 radius / step` points on `[-radius, radius]`, step adjusted to fit.
    pub fn covering(radius: f64, step: f64) -> Result<Self> {
        let n = ((2.0 * radius / step).round() as usize).max(1);
        Self::new(-radius, 2.0 * radius / n as f64, n + 1)
    }

    #[inline]
    pub fn point(&self, k: usize) -> f64 {
        self.origin + k as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.point(self.count - 1)
    }

    /// `(k, lambda)` with `z = (1 - lambda) x_k + lambda x_{k+1}`, if `z` is inside.
    #[inline]
    pub fn locate(&self, z: f64) -> Option<(usize, f64)> {
        let u = (z - self.origin) / self.step;
        if !(u >= 0.0 && u <= (self.count - 1) as f64) {
            return None;
        }
        let k = (u.floor() as usize).min(self.count - 2);
        Some((k, u - k as f64))
    }
}

/// Which lattice points get a row at each start time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bands {
    /// Every lattice point at every start time.
    Full,
    /// Inclusive index range per start time.
    Windows(Vec<(usize, usize)>),
}

/// Index windows of half-width `margin` around `centers[a]`, one per start time.
pub fn bands_around(lattice: &Lattice, centers: &[f64], margin: usize) -> Vec<(usize, usize)> {
    centers
        .iter()
        .map(|&c| {
            let u = ((c - lattice.origin) / lattice.step).floor();
            let k = u.clamp(0.0, (lattice.count - 1) as f64) as usize;
            (k.saturating_sub(margin), (k + 1 + margin).min(lattice.count - 1))
        })
        .collect()
}

/// Grid parameters of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    /// Solver level (at most the path level).
    pub level: u32,
    /// Stored time grid level (at most `level`).
    pub time_level: u32,
    /// Start-time grid level (at most `time_level`).
    pub start_level: u32,
    pub lattice: Lattice,
    pub bands: Bands,
    pub scheme: Scheme,
}

/// Semiflow table of displacements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTable {
    pub path: String,
    pub seed: u64,
    pub scheme: Scheme,
    pub level: u32,
    pub time_level: u32,
    pub start_level: u32,
    pub horizon: f64,
    pub lattice: Lattice,
    /// Inclusive lattice range per start time.
    pub bands: Vec<(usize, usize)>,
    /// Driver at the stored times.
    pub driver: Vec<f64>,
    /// Offset of the first row of each start time in `offsets`.
    row_start: Vec<usize>,
    /// Offset of each row's data in `data`.
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl FlowTable {
    pub fn time_points(&self) -> usize {
        (1usize << self.time_level) + 1
    }

    pub fn time(&self, b: usize) -> f64 {
        self.horizon * b as f64 / (1usize << self.time_level) as f64
    }

    pub fn starts(&self) -> usize {
        (1usize << self.start_level) + 1
    }

    /// Stored-time index of start `a`.
    pub fn start_index(&self, a: usize) -> usize {
        a << (self.time_level - self.start_level)
    }

    pub fn step(&self) -> f64 {
        self.horizon / (1usize << self.level) as f64
    }

    /// Displacements `D^{s_a, x_i}_t` for stored times `t >= s_a`.
    pub fn row(&self, a: usize, i: usize) -> Option<&[f64]> {
        let (lo, hi) = *self.bands.get(a)?;
        if i < lo || i > hi {
            return None;
        }
        let r = self.row_start[a] + (i - lo);
        Some(&self.data[self.offsets[r]..self.offsets[r + 1]])
    }

    /// Displacement at start `a`, lattice point `i`, stored time `b >= start`.
    pub fn displacement(&self, a: usize, i: usize, b: usize) -> Option<f64> {
        let sb = self.start_index(a);
        if b < sb {
            return None;
        }
        self.row(a, i).map(|r| r[b - sb])
    }

    /// `X^{s_a, x_i}_{t_b}`.
    pub fn value(&self, a: usize, i: usize, b: usize) -> Option<f64> {
        let d = self.displacement(a, i, b)?;
        Some(self.lattice.point(i) + (self.driver[b] - self.driver[self.start_index(a)]) + d)
    }

    /// Piecewise-linear interpolation of `D^{s_a, .}_{t_b}` at `z`.
    pub fn interpolate_displacement(&self, a: usize, z: f64, b: usize) -> Option<f64> {
        let (k, lam) = self.lattice.locate(z)?;
        let d0 = self.displacement(a, k, b)?;
        if lam == 0.0 {
            return Some(d0);
        }
        let d1 = self.displacement(a, k + 1, b)?;
        Some(d0 + lam * (d1 - d0))
    }

    /// `X^{s_a, z}_{t_b}` by interpolating the displacement.
    pub fn interpolate(&self, a: usize, z: f64, b: usize) -> Option<f64> {
        let d = self.interpolate_displacement(a, z, b)?;
        Some(z + (self.driver[b] - self.driver[self.start_index(a)]) + d)
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Largest `|X - X'|` over all entries of two tables on the same grids and driver.
    pub fn sup_distance(&self, other: &FlowTable) -> Result<f64> {
        if self.lattice != other.lattice
            || self.bands != other.bands
            || self.time_level != other.time_level
            || self.start_level != other.start_level
            || self.driver != other.driver
        {
            return Err(Error::Incompatible("flows live on different grids or paths".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// CSV rows `s,x,t,value,displacement`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# path={},scheme={},level={},time_level={}",
            self.path,
            self.scheme.tag(),
            self.level,
            self.time_level
        )?;
        writeln!(w, "s,x,t,value,displacement")?;
        for a in 0..self.starts() {
            let (lo, hi) = self.bands[a];
            for i in lo..=hi {
                for b in self.start_index(a)..self.time_points() {
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        fmt(self.time(self.start_index(a))),
                        fmt(self.lattice.point(i)),
                        fmt(self.time(b)),
                        fmt(self.value(a, i, b).unwrap_or(f64::NAN)),
                        fmt(self.displacement(a, i, b).unwrap_or(f64::NAN))
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Binary dump: magic, JSON header length and header, then little-endian data.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = self.clone();
        let data = std::mem::take(&mut header.data);
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FLOW_MAGIC {
            return Err(Error::Format("not a flow dump".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let mut table: FlowTable = serde_json::from_slice(&json).map_err(|e| Error::Format(e.to_string()))?;
        r.read_exact(&mut len)?;
        let n = u64::from_le_bytes(len) as usize;
        if n != *table.offsets.last().unwrap_or(&0) {
            return Err(Error::Format("flow dump data length does not match its header".into()));
        }
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        table.data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(table)
    }
}

/// Build the flow of `b` along `path` over the grids of `spec`, one solver run per row.
pub fn build_flow(b: &DriftField, path: &BrownianPath, spec: &FlowSpec, backend: Backend) -> Result<FlowTable> {
    if path.dim() != 1 || b.dim != 1 {
        return Err(Error::Unsupported("flow tables are implemented for d = 1".into()));
    }
    if spec.level > path.level() || spec.time_level > spec.level || spec.start_level > spec.time_level {
        return Err(Error::Parameter(format!(
            "need start level {} <= time level {} <= solver level {} <= path level {}",
            spec.start_level,
            spec.time_level,
            spec.level,
            path.level()
        )));
    }
    let starts = (1usize << spec.start_level) + 1;
    let bands = match &spec.bands {
        Bands::Full => vec![(0, spec.lattice.count - 1); starts],
        Bands::Windows(w) => {
            if w.len() != starts || w.iter().any(|&(lo, hi)| lo > hi || hi >= spec.lattice.count) {
                return Err(Error::Parameter(format!(
                    "need {starts} valid lattice windows, got {}",
                    w.len()
                )));
            }
            w.clone()
        }
    };
    let nt = (1usize << spec.time_level) + 1;
    let start_stride = 1usize << (spec.time_level - spec.start_level);
    let time_stride = 1usize << (spec.level - spec.time_level);
    let path_stride = 1usize << (path.level() - spec.time_level);
    let mut jobs = Vec::new();
    let mut row_start = Vec::with_capacity(starts + 1);
    let mut offsets = vec![0usize];
    for (a, &(lo, hi)) in bands.iter().enumerate() {
        row_start.push(jobs.len());
        for i in lo..=hi {
            jobs.push((a, i));
            let len = nt - a * start_stride;
            offsets.push(offsets.last().unwrap() + len);
        }
    }
    row_start.push(jobs.len());
    let total = *offsets.last().unwrap();
    if total > FLOW_CAP {
        return Err(Error::Resource {
            what: "flow table entries",
            requested: total as u128,
            cap: FLOW_CAP as u128,
        });
    }
    let rows = backend.try_map(jobs.len(), |r| -> Result<Vec<f64>> {
        let (a, i) = jobs[r];
        let start = a * start_stride * time_stride;
        let x = [spec.lattice.point(i)];
        let sol = match spec.scheme {
            Scheme::NonlinearYoung => solve_nonlinear_young_from(b, path, start, &x, spec.level, None)?,
            Scheme::EulerMaruyama => solve_euler_from(b, path, start, &x, spec.level, None)?,
        };
        let mut out = Vec::with_capacity(nt - a * start_stride);
        let mut acc = 0.0;
        for (k, step) in sol.drift_steps.iter().enumerate() {
            acc += step;
            if k % time_stride == 0 {
                out.push(acc);
            }
        }
        Ok(out)
    })?;
    Ok(FlowTable {
        path: path.id(),
        seed: path.seed(),
        scheme: spec.scheme,
        level: spec.level,
        time_level: spec.time_level,
        start_level: spec.start_level,
        horizon: path.grid().horizon(),
        lattice: spec.lattice,
        bands,
        driver: (0..nt).map(|b| path.scalar(b * path_stride)).collect(),
        row_start,
        offsets,
        data: rows.concat(),
    })
}

/// Defect threshold `c1 h^theta1 + c2 dx^theta2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefectThreshold {
    pub c1: f64,
    pub theta1: f64,
    pub c2: f64,
    pub theta2: f64,
}

impl DefectThreshold {
    pub fn at(&self, h: f64, dx: f64) -> f64 {
        self.c1 * h.powf(self.theta1) + self.c2 * dx.powf(self.theta2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowPropertyReport {
    pub max_defect: f64,
    pub mean_defect: f64,
    pub triples: usize,
    /// Triples whose intermediate point fell outside the stored rows.
    pub skipped: usize,
    pub step: f64,
    pub lattice_step: f64,
    pub threshold: Option<f64>,
    pub pass: bool,
}

/// `|X^{s,x}_t - X^{u, X^{s,x}_u}_t|` over all start triples `s < u <= t` and
/// stored rows, with piecewise-linear interpolation in `x`.
pub fn check_flow_property(flow: &FlowTable, threshold: Option<DefectThreshold>) -> FlowPropertyReport {
    let nt = flow.time_points();
    let (mut max, mut sum, mut n, mut skipped) = (0.0f64, 0.0, 0usize, 0usize);
    for a in 0..flow.starts() {
        let (lo, hi) = flow.bands[a];
        let sa = flow.start_index(a);
        for c in a + 1..flow.starts() {
            let sc = flow.start_index(c);
            for i in lo..=hi {
                let row = flow.row(a, i).expect("band row");
                let du = row[sc - sa];
                let z = flow.lattice.point(i) + flow.driver[sc] - flow.driver[sa] + du;
                for b in sc..nt {
                    match flow.interpolate_displacement(c, z, b) {
                        Some(dz) => {
                            let defect = (row[b - sa] - du - dz).abs();
                            max = max.max(defect);
                            sum += defect;
                            n += 1;
                        }
                        None => skipped += 1,
                    }
                }
            }
        }
    }
    let threshold = threshold.map(|t| t.at(flow.step(), flow.lattice.step));
    FlowPropertyReport {
        max_defect: max,
        mean_defect: if n > 0 { sum / n as f64 } else { 0.0 },
        triples: n,
        skipped,
        step: flow.step(),
        lattice_step: flow.lattice.step,
        threshold,
        pass: threshold.is_none_or(|t| max <= t),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderInX {
    pub kappa: f64,
    pub constant: f64,
    pub separations: Vec<f64>,
    /// Largest `|X^{s,x}_t - X^{s,y}_t|` per separation over `s`, `t` and `x, y` in `K`.
    pub max_increments: Vec<f64>,
    pub r_squared: f64,
    pub flags: Vec<String>,
}

/// Fit `max |X^{s,x}_t - X^{s,y}_t| ~ C |x - y|^kappa` over separations of
/// `2^j` lattice steps, for lattice points within `[-radius, radius]`.
pub fn holder_in_x(flow: &FlowTable, radius: f64) -> Result<HolderInX> {
    let inside: Vec<usize> = (0..flow.lattice.count)
        .filter(|&i| flow.lattice.point(i).abs() <= radius)
        .collect();
    let mut seps = Vec::new();
    let mut sep = 1usize;
    while inside.len() > sep {
        seps.push(sep);
        sep *= 2;
    }
    if seps.len() < 8 {
        return Err(Error::Precondition(format!(
            "need at least 8 spatial separations in K, lattice gives {}",
            seps.len()
        )));
    }
    let nt = flow.time_points();
    let mut max_inc = vec![0.0f64; seps.len()];
    for a in 0..flow.starts() {
        let sa = flow.start_index(a);
        for (j, &sep) in seps.iter().enumerate() {
            for &i in &inside {
                let k = i + sep;
                if flow.lattice.point(k.min(flow.lattice.count - 1)).abs() > radius || k >= flow.lattice.count {
                    continue;
                }
                let (Some(ri), Some(rk)) = (flow.row(a, i), flow.row(a, k)) else {
                    continue;
                };
                let dx = flow.lattice.point(k) - flow.lattice.point(i);
                for b in sa..nt {
                    let inc = (dx + rk[b - sa] - ri[b - sa]).abs();
                    max_inc[j] = max_inc[j].max(inc);
                }
            }
        }
    }
    let dists: Vec<f64> = seps
        .iter()
        .map(|&s| flow.lattice.point(s) - flow.lattice.point(0))
        .collect();
    let mut flags = Vec::new();
    if max_inc.iter().any(|&m| m <= 0.0) {
        flags.push("spatially degenerate flow".into());
        return Ok(HolderInX {
            kappa: f64::NAN,
            constant: f64::NAN,
            separations: dists,
            max_increments: max_inc,
            r_squared: f64::NAN,
            flags,
        });
    }
    let lx: Vec<f64> = dists.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = max_inc.iter().map(|m| m.ln()).collect();
    let fit = fit_line(&lx, &ly, &[]).expect("at least 8 distinct separations");
    let kappa = fit.slope;
    let constant = dists
        .iter()
        .zip(&max_inc)
        .map(|(d, m)| m / d.powf(kappa))
        .fold(0.0, f64::max);
    Ok(HolderInX {
        kappa,
        constant,
        separations: dists,
        max_increments: max_inc,
        r_squared: fit.r_squared,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlueReport {
    /// Largest `|A - B|` over shared entries.
    pub defect: f64,
    pub shared_entries: usize,
    pub overlap_horizon: f64,
}

/// Check `b` (longer horizon) against `a` on their overlap and return `b` with
/// the overlapping entries taken from `a`.
pub fn glue_flows(a: &FlowTable, b: &FlowTable) -> Result<(FlowTable, GlueReport)> {
    if a.horizon > b.horizon {
        return Err(Error::Parameter(format!(
            "first flow must not be longer: {} > {}",
            a.horizon, b.horizon
        )));
    }
    if a.seed != b.seed || a.lattice != b.lattice {
        return Err(Error::Incompatible("flows come from different paths or lattices".into()));
    }
    // map a's stored times onto b's
    let bt = |t: f64| -> Option<usize> {
        let k = (t / b.horizon * (1usize << b.time_level) as f64).round();
        let k = k as usize;
        (k < b.time_points() && b.time(k) == t).then_some(k)
    };
    for ka in 0..a.time_points() {
        if let Some(kb) = bt(a.time(ka)) {
            if a.driver[ka].to_bits() != b.driver[kb].to_bits() {
                return Err(Error::Incompatible(format!(
                    "driver values differ at t = {}; the paths are not one lineage",
                    a.time(ka)
                )));
            }
        }
    }
    let mut out = b.clone();
    let mut defect = 0.0f64;
    let mut shared = 0usize;
    for sa in 0..a.starts() {
        let Some(sb_time) = bt(a.time(a.start_index(sa))) else {
            continue;
        };
        if sb_time % (1usize << (b.time_level - b.start_level)) != 0 {
            continue;
        }
        let sb = sb_time >> (b.time_level - b.start_level);
        let (lo, hi) = a.bands[sa];
        for i in lo..=hi {
            if b.row(sb, i).is_none() {
                continue;
            }
            for ka in a.start_index(sa)..a.time_points() {
                let Some(kb) = bt(a.time(ka)) else { continue };
                let va = a.displacement(sa, i, ka).expect("row");
                let vb = b.displacement(sb, i, kb).expect("row");
                defect = defect.max((va - vb).abs());
                shared += 1;
                let (lo_b, _) = out.bands[sb];
                let r = out.row_start[sb] + (i - lo_b);
                let off = out.offsets[r] + (kb - out.start_index(sb));
                out.data[off] = va;
            }
        }
    }
    Ok((
        out,
        GlueReport {
            defect,
            shared_entries: shared,
            overlap_horizon: a.horizon,
        },
    ))
}

/// Thresholds of the uniqueness certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateThresholds {
    /// Bound on `max |Y_t - X^{s,Y_s}_t| / w(s,t)^beta`.
    pub defect_ratio: f64,
    /// Bound on `max_tau |F(tau) - F(0)|`.
    pub constancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub kappa: f64,
    pub beta: f64,
    pub max_defect_ratio: f64,
    pub max_constancy: f64,
    /// Largest `beta` in `[1, 8]` for which the defect bound still holds, if any.
    pub best_beta: Option<f64>,
    /// `F(tau) = X^{tau, Y_tau}_T` per start time.
    pub f_values: Vec<f64>,
    pub escaped: bool,
    pub thresholds: CertificateThresholds,
    pub pass: bool,
}

/// Compare a solution `y` against the flow it should follow.
///
/// Checks the local defect `|Y_t - X^{s,Y_s}_t| / w(s,t)^beta` over start times
/// `s` and stored times `t > s`, and the constancy of `F(tau) = X^{tau,Y_tau}_T`
/// over the start grid.
pub fn uniqueness_certificate(
    y: &SolutionPath,
    flow: &FlowTable,
    w: &ControlFunction,
    kappa: f64,
    beta: f64,
    thresholds: CertificateThresholds,
) -> Result<UniquenessReport> {
    if !(kappa * beta > 1.0) {
        return Err(Error::Precondition(format!(
            "the telescoping argument needs kappa * beta > 1, got {kappa} * {beta} = {}",
            kappa * beta
        )));
    }
    if y.dim != 1 || y.times.first() != Some(&0.0) || y.level < flow.time_level {
        return Err(Error::Incompatible(
            "solution must be one-dimensional, start at 0 and be at least as fine as the flow's time grid".into(),
        ));
    }
    if (y.times.last().copied().unwrap_or(0.0) - flow.horizon).abs() > 0.0 {
        return Err(Error::Incompatible("solution and flow have different horizons".into()));
    }
    let y_stride = 1usize << (y.level - flow.time_level);
    let y_at = |b: usize| y.scalar(b * y_stride);
    let nt = flow.time_points();
    let last = nt - 1;
    let mut escaped = false;
    let mut max_ratio = 0.0f64;
    let mut pairs = Vec::new();
    let mut f_values = Vec::with_capacity(flow.starts());
    for a in 0..flow.starts() {
        let sa = flow.start_index(a);
        let ys = y_at(sa);
        for b in sa + 1..nt {
            match flow.interpolate(a, ys, b) {
                Some(x) => {
                    let ws = w.eval(flow.time(sa), flow.time(b));
                    let defect = (y_at(b) - x).abs();
                    max_ratio = max_ratio.max(defect / ws.powf(beta));
                    pairs.push((defect, ws));
                }
                None => escaped = true,
            }
        }
        match flow.interpolate(a, ys, last) {
            Some(v) => f_values.push(v),
            None => {
                escaped = true;
                f_values.push(f64::NAN);
            }
        }
    }
    let f0 = f_values[0];
    let max_constancy = f_values
        .iter()
        .filter(|v| v.is_finite())
        .map(|v| (v - f0).abs())
        .fold(0.0, f64::max);
    let holds = |beta: f64| pairs.iter().all(|&(d, ws)| d <= thresholds.defect_ratio * ws.powf(beta));
    let best_beta = if !holds(1.0) {
        None
    } else if holds(8.0) {
        Some(8.0)
    } else {
        let (mut lo, mut hi) = (1.0, 8.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if holds(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(lo)
    };
    let pass = !escaped && max_ratio <= thresholds.defect_ratio && max_constancy <= thresholds.constancy;
    Ok(UniquenessReport {
        kappa,
        beta,
        max_defect_ratio: max_ratio,
        max_constancy,
        best_beta,
        f_values,
        escaped,
        thresholds,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{mollify, DriftSpec, Exponent};
    use crate::paths::generate_path;

    fn field(spec: DriftSpec) -> DriftField {
        DriftField::new(spec, 1, Exponent(4.0), Exponent(4.0)).unwrap()
    }

    fn spec(level: u32, lattice: Lattice) -> FlowSpec {
        FlowSpec {
            level,
            time_level: 5,
            start_level: 2,
            lattice,
            bands: Bands::Full,
            scheme: Scheme::NonlinearYoung,
        }
    }

    #[test]
    fn zero_drift_flow_is_the_shifted_path() {
        let path = generate_path(1, 1.0, 10, 1).unwrap();
        let lattice = Lattice::symmetric(1.0, 4).unwrap();
        let flow = build_flow(&field(DriftSpec::Zero), &path, &spec(8, lattice), Backend::Parallel).unwrap();
        for a in 0..flow.starts() {
            for i in 0..lattice.count {
                let sa = flow.start_index(a);
                assert_eq!(flow.value(a, i, sa), Some(lattice.point(i)));
                for b in sa..flow.time_points() {
                    assert_eq!(flow.displacement(a, i, b), Some(0.0));
                }
            }
        }
        let r = check_flow_property(&flow, None);
        assert_eq!(r.max_defect, 0.0);
        assert!(r.triples > 0);
        let h = holder_in_x(&build_flow(&field(DriftSpec::Zero), &path, &spec(8, Lattice::symmetric(1.0, 8).unwrap()), Backend::Parallel).unwrap(), 1.0).unwrap();
        assert!((h.kappa - 1.0).abs() < 1e-12);
        assert!((h.constant - 1.0).abs() < 1e-12);
    }

    #[test]
    fn initial_condition_holds_for_any_drift() {
        let path = generate_path(2, 1.0, 10, 1).unwrap();
        let b = mollify(&field(DriftSpec::Sign), 0.1).unwrap();
        let lattice = Lattice::symmetric(1.0, 3).unwrap();
        for scheme in [Scheme::NonlinearYoung, Scheme::EulerMaruyama] {
            let mut s = spec(9, lattice);
            s.scheme = scheme;
            let flow = build_flow(&b, &path, &s, Backend::Sequential).unwrap();
            for a in 0..flow.starts() {
                for i in 0..lattice.count {
                    assert_eq!(flow.value(a, i, flow.start_index(a)), Some(lattice.point(i)));
                }
            }
        }
    }

    #[test]
    fn rows_do_not_depend_on_the_rest_of_the_lattice() {
        let path = generate_path(3, 1.0, 10, 1).unwrap();
        let b = mollify(&field(DriftSpec::Sign), 0.1).unwrap();
        let coarse = build_flow(&b, &path, &spec(8, Lattice::symmetric(1.0, 3).unwrap()), Backend::Parallel).unwrap();
        let fine = build_flow(&b, &path, &spec(8, Lattice::symmetric(1.0, 4).unwrap()), Backend::Sequential).unwrap();
        for a in 0..coarse.starts() {
            for i in 0..coarse.lattice.count {
                assert_eq!(coarse.row(a, i), fine.row(a, 2 * i));
            }
        }
    }

    #[test]
    fn linear_drift_flow_property_is_exact_up_to_rounding() {
        let path = generate_path(4, 1.0, 10, 1).unwrap();
        let flow = build_flow(
            &field(DriftSpec::Linear { lambda: 1.0 }),
            &path,
            &spec(10, Lattice::symmetric(3.0, 6).unwrap()),
            Backend::Parallel,
        )
        .unwrap();
        let r = check_flow_property(&flow, None);
        assert!(r.max_defect < 1e-12, "{}", r.max_defect);
    }

    #[test]
    fn self_glue_is_identity_and_lineage_is_checked() {
        let path = generate_path(5, 1.0, 10, 1).unwrap();
        let b = mollify(&field(DriftSpec::Sign), 0.1).unwrap();
        let flow = build_flow(&b, &path, &spec(8, Lattice::symmetric(1.0, 3).unwrap()), Backend::Parallel).unwrap();
        let (glued, report) = glue_flows(&flow, &flow).unwrap();
        assert_eq!(glued, flow);
        assert_eq!(report.defect, 0.0);
        let other = generate_path(6, 1.0, 10, 1).unwrap();
        let flow2 = build_flow(&b, &other, &spec(8, Lattice::symmetric(1.0, 3).unwrap()), Backend::Parallel).unwrap();
        assert!(matches!(glue_flows(&flow, &flow2), Err(Error::Incompatible(_))));
    }

    #[test]
    fn zero_drift_glue_across_horizons_has_no_defect() {
        let path = generate_path(7, 2.0, 11, 1).unwrap();
        let short = path.restrict_prefix(1).unwrap();
        let lattice = Lattice::symmetric(1.0, 3).unwrap();
        let mut sb = spec(11, lattice);
        sb.time_level = 6;
        sb.start_level = 3;
        let long = build_flow(&field(DriftSpec::Zero), &path, &sb, Backend::Parallel).unwrap();
        let sa = FlowSpec { level: 10, time_level: 5, start_level: 2, ..sb.clone() };
        let shortf = build_flow(&field(DriftSpec::Zero), &short, &sa, Backend::Parallel).unwrap();
        let (_, report) = glue_flows(&shortf, &long).unwrap();
        assert_eq!(report.defect, 0.0);
        assert!(report.shared_entries > 0);
    }

    #[test]
    fn binary_dump_round_trips() {
        let path = generate_path(8, 1.0, 8, 1).unwrap();
        let flow = build_flow(
            &mollify(&field(DriftSpec::Sign), 0.2).unwrap(),
            &path,
            &spec(8, Lattice::symmetric(1.0, 2).unwrap()),
            Backend::Parallel,
        )
        .unwrap();
        let mut buf = Vec::new();
        flow.write_binary(&mut buf).unwrap();
        assert_eq!(FlowTable::read_binary(buf.as_slice()).unwrap(), flow);
        let mut csv = Vec::new();
        flow.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().lines().nth(1) == Some("s,x,t,value,displacement"));
    }

    #[test]
    fn flow_rows_certify_themselves() {
        let path = generate_path(9, 1.0, 10, 1).unwrap();
        let b = mollify(&field(DriftSpec::Sign), 0.1).unwrap();
        let y = solve_nonlinear_young_from(&b, &path, 0, &[0.3], 10, None).unwrap();
        let lattice = Lattice::covering(3.0, 2f64.powi(-6)).unwrap();
        let centers: Vec<f64> = (0..=4).map(|a| y.scalar(a * 256)).collect();
        let flow = build_flow(
            &b,
            &path,
            &FlowSpec {
                level: 10,
                time_level: 5,
                start_level: 2,
                lattice,
                bands: Bands::Windows(bands_around(&lattice, &centers, 1)),
                scheme: Scheme::NonlinearYoung,
            },
            Backend::Parallel,
        )
        .unwrap();
        let th = CertificateThresholds { defect_ratio: 1.0, constancy: 1e-2 };
        let r = uniqueness_certificate(&y, &flow, &ControlFunction::length(), 0.9, 1.25, th).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(matches!(
            uniqueness_certificate(&y, &flow, &ControlFunction::length(), 0.9, 1.0, th),
            Err(Error::Precondition(_))
        ));
    }
}
