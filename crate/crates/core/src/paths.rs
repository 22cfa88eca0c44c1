//! Brownian driver paths on dyadic grids.
//!
//! A path at level `L` is built from its endpoint by `L` Brownian-bridge
//! midpoint refinements. The refinement to level `j + 1` draws its Gaussians
//! from the counter stream keyed by `lineage[j]`, so a path refined `k` more
//! times is bit-identical to the path generated directly at level `L + k`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, CounterRng};

/// Default cap on grid points per path.
pub const DEFAULT_POINT_CAP: usize = 1 << 26;

const DUMP_MAGIC: &[u8; 4] = b"RNBP";
const DUMP_VERSION: u32 = 1;

/// Uniform grid `t_k = k T / 2^L`, `k = 0..=2^L`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DyadicGrid {
    horizon: f64,
    level: u32,
}

impl DyadicGrid {
    pub fn new(horizon: f64, level: u32) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Parameter(format!("horizon must be > 0, got {horizon}")));
        }
        if level > 40 {
            return Err(Error::Resource {
                what: "dyadic grid",
                requested: (1u128 << level) + 1,
                cap: DEFAULT_POINT_CAP as u128,
            });
        }
        Ok(Self { horizon, level })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Number of intervals, `2^L`.
    pub fn intervals(&self) -> usize {
        1usize << self.level
    }

    /// Number of points, `2^L + 1`.
    pub fn len(&self) -> usize {
        self.intervals() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.intervals() as f64
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.intervals() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Index of `t` if it is exactly a grid point.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.horizon * self.intervals() as f64).round();
        if k < 0.0 || k > self.intervals() as f64 {
            return None;
        }
        let k = k as usize;
        (self.time(k) == t).then_some(k)
    }

    /// Index of the grid point nearest to `t`, clamped to the grid.
    pub fn nearest_index(&self, t: f64) -> usize {
        let k = (t / self.horizon * self.intervals() as f64).round();
        k.clamp(0.0, self.intervals() as f64) as usize
    }

    pub fn refined(&self) -> Self {
        Self {
            horizon: self.horizon,
            level: self.level + 1,
        }
    }
}

/// A `d`-dimensional driver sampled on a dyadic grid, starting at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    grid: DyadicGrid,
    dim: usize,
    seed: u64,
    lineage: Vec<u64>,
    /// Row-major `(2^L + 1) x d`.
    values: Vec<f64>,
}

fn check_cap(points: usize, dim: usize, cap: usize) -> Result<()> {
    let requested = points as u128 * dim.max(1) as u128;
    if requested > cap as u128 {
        return Err(Error::Resource {
            what: "path grid points",
            requested,
            cap: cap as u128,
        });
    }
    Ok(())
}

/// Seed of the refinement that takes a path of `root` from level `level` to `level + 1`.
pub fn lineage_seed(root: u64, level: u32) -> u64 {
    CounterRng::new(root).derive(stream::REFINE, level as u64)
}

/// Brownian path with the default lineage for `seed`.
pub fn generate_path(seed: u64, horizon: f64, level: u32, dim: usize) -> Result<BrownianPath> {
    generate_path_capped(seed, horizon, level, dim, DEFAULT_POINT_CAP)
}

pub fn generate_path_capped(
    seed: u64,
    horizon: f64,
    level: u32,
    dim: usize,
    cap: usize,
) -> Result<BrownianPath> {
    let lineage: Vec<u64> = (0..level).map(|j| lineage_seed(seed, j)).collect();
    generate_from_lineage(seed, horizon, &lineage, dim, cap)
}

/// Path whose `j`-th refinement uses `lineage[j]`; its level is `lineage.len()`.
pub fn generate_from_lineage(
    seed: u64,
    horizon: f64,
    lineage: &[u64],
    dim: usize,
    cap: usize,
) -> Result<BrownianPath> {
    if dim == 0 {
        return Err(Error::Parameter("dimension must be >= 1".into()));
    }
    let grid = DyadicGrid::new(horizon, lineage.len() as u32)?;
    check_cap(grid.len(), dim, cap)?;
    let rng = CounterRng::new(seed);
    let mut values = vec![0.0; 2 * dim];
    for c in 0..dim {
        values[dim + c] = horizon.sqrt() * paired_normal(&rng, 0, stream::ENDPOINT, dim, c);
    }
    let mut path = BrownianPath {
        grid: DyadicGrid::new(horizon, 0)?,
        dim,
        seed,
        lineage: Vec::with_capacity(lineage.len()),
        values,
    };
    for &s in lineage {
        path = refine_with_seed_capped(&path, s, cap)?;
    }
    Ok(path)
}

/// Gaussian for `(index, coord)` packing two coordinates per Philox block.
#[inline]
fn paired_normal(rng: &CounterRng, index: usize, stream: u32, dim: usize, coord: usize) -> f64 {
    let flat = (index * dim + coord) as u64;
    let (a, b) = rng.normal_pair(flat / 2, stream, 0);
    if flat % 2 == 0 {
        a
    } else {
        b
    }
}

/// Brownian-bridge midpoint refinement with the path's default lineage.
pub fn refine(path: &BrownianPath) -> Result<BrownianPath> {
    let s = lineage_seed(path.seed, path.grid.level);
    refine_with_seed_capped(path, s, DEFAULT_POINT_CAP)
}

pub fn refine_with_seed(path: &BrownianPath, refinement_seed: u64) -> Result<BrownianPath> {
    refine_with_seed_capped(path, refinement_seed, DEFAULT_POINT_CAP)
}

fn refine_with_seed_capped(path: &BrownianPath, refinement_seed: u64, cap: usize) -> Result<BrownianPath> {
    let grid = path.grid.refined();
    check_cap(grid.len(), path.dim, cap)?;
    let d = path.dim;
    let half_sd = (path.grid.step() / 4.0).sqrt();
    let rng = CounterRng::new(refinement_seed);
    let coarse = path.grid.len();
    let mut values = vec![0.0; grid.len() * d];
    for k in 0..coarse {
        values[2 * k * d..(2 * k + 1) * d].copy_from_slice(&path.values[k * d..(k + 1) * d]);
    }
    for k in 0..coarse - 1 {
        for c in 0..d {
            let left = path.values[k * d + c];
            let right = path.values[(k + 1) * d + c];
            let z = paired_normal(&rng, k, stream::REFINE, d, c);
            values[(2 * k + 1) * d + c] = 0.5 * (left + right) + half_sd * z;
        }
    }
    let mut lineage = path.lineage.clone();
    lineage.push(refinement_seed);
    Ok(BrownianPath {
        grid,
        dim: d,
        seed: path.seed,
        lineage,
        values,
    })
}

impl BrownianPath {
    /// Driver from explicit samples, e.g. a smooth or zero signal. Must start at 0.
    pub fn from_values(grid: DyadicGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != grid.len() * dim {
            return Err(Error::Parameter(format!(
                "expected {} values for {} points in dimension {dim}, got {}",
                grid.len() * dim,
                grid.len(),
                values.len()
            )));
        }
        if values[..dim].iter().any(|&v| v != 0.0) {
            return Err(Error::Parameter("driver must start at the origin".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("driver values must be finite".into()));
        }
        Ok(Self {
            grid,
            dim,
            seed: 0,
            lineage: Vec::new(),
            values,
        })
    }

    /// The zero driver, for the noiseless ODE.
    pub fn zero(horizon: f64, level: u32, dim: usize) -> Result<Self> {
        let grid = DyadicGrid::new(horizon, level)?;
        check_cap(grid.len(), dim, DEFAULT_POINT_CAP)?;
        Self::from_values(grid, dim, vec![0.0; grid.len() * dim])
    }

    pub fn grid(&self) -> &DyadicGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Short identifier used in reports and table metadata.
    pub fn id(&self) -> String {
        format!("seed{:016x}-L{}-d{}", self.seed, self.grid.level, self.dim)
    }

    pub fn lineage(&self) -> &[u64] {
        &self.lineage
    }

    pub fn level(&self) -> u32 {
        self.grid.level
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn point(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Scalar value for one-dimensional drivers.
    #[inline]
    pub fn scalar(&self, k: usize) -> f64 {
        self.values[k * self.dim]
    }

    pub fn coordinate(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.dim).copied().collect()
    }

    /// Linear interpolation; exact at grid points.
    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let horizon = self.grid.horizon;
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::Domain(format!("t={t} outside [0, {horizon}]")));
        }
        let n = self.grid.intervals();
        let mut k = ((t / horizon) * n as f64).floor() as usize;
        k = k.min(n);
        while k > 0 && self.grid.time(k) > t {
            k -= 1;
        }
        while k < n && self.grid.time(k + 1) <= t {
            k += 1;
        }
        let tk = self.grid.time(k);
        if tk == t || k == n {
            return Ok(self.point(k).to_vec());
        }
        let lam = (t - tk) / self.grid.step();
        Ok(self
            .point(k)
            .iter()
            .zip(self.point(k + 1))
            .map(|(a, b)| a + lam * (b - a))
            .collect())
    }

    /// Even-index restriction: the path one level down.
    pub fn coarsen(&self) -> Result<BrownianPath> {
        if self.grid.level == 0 {
            return Err(Error::Domain("cannot coarsen a level-0 path".into()));
        }
        let grid = DyadicGrid::new(self.grid.horizon, self.grid.level - 1)?;
        let d = self.dim;
        let values = (0..grid.len())
            .flat_map(|k| self.point(2 * k).iter().copied())
            .collect::<Vec<_>>();
        let mut lineage = self.lineage.clone();
        lineage.pop();
        Ok(BrownianPath {
            grid,
            dim: d,
            seed: self.seed,
            lineage,
            values,
        })
    }

    /// Restriction to `[0, T / 2^k]`, keeping the step size. The result shares
    /// its samples with `self` on the overlap.
    pub fn restrict_prefix(&self, halvings: u32) -> Result<BrownianPath> {
        if halvings > self.grid.level {
            return Err(Error::Domain(format!(
                "cannot halve a level-{} path {halvings} times",
                self.grid.level
            )));
        }
        let level = self.grid.level - halvings;
        let horizon = self.grid.horizon / (1u64 << halvings) as f64;
        let grid = DyadicGrid::new(horizon, level)?;
        Ok(BrownianPath {
            grid,
            dim: self.dim,
            seed: self.seed,
            lineage: self.lineage.clone(),
            values: self.values[..grid.len() * self.dim].to_vec(),
        })
    }

    /// Binary dump: magic, version, horizon, level, dim, seed, lineage, values (all little endian).
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&DUMP_VERSION.to_le_bytes())?;
        w.write_all(&self.grid.horizon.to_le_bytes())?;
        w.write_all(&self.grid.level.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.lineage.len() as u32).to_le_bytes())?;
        for s in &self.lineage {
            w.write_all(&s.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|e| Error::Format(format!("truncated path dump: {e}")))?;
            Ok(b)
        }
        if &take::<4, _>(&mut r)? != DUMP_MAGIC {
            return Err(Error::Format("not a path dump (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut r)?);
        if version != DUMP_VERSION {
            return Err(Error::Format(format!("unsupported dump version {version}")));
        }
        let horizon = f64::from_le_bytes(take(&mut r)?);
        let level = u32::from_le_bytes(take(&mut r)?);
        let dim = u32::from_le_bytes(take(&mut r)?) as usize;
        let seed = u64::from_le_bytes(take(&mut r)?);
        let nl = u32::from_le_bytes(take(&mut r)?) as usize;
        let grid = DyadicGrid::new(horizon, level)?;
        check_cap(grid.len(), dim, DEFAULT_POINT_CAP)?;
        let lineage = (0..nl)
            .map(|_| take(&mut r).map(u64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let values = (0..grid.len() * dim)
            .map(|_| take(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            grid,
            dim,
            seed,
            lineage,
            values,
        })
    }

    /// CSV dump with a `# horizon=..,level=..,dim=..,seed=..` header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# horizon={},level={},dim={},seed={}",
            self.grid.horizon, self.grid.level, self.dim, self.seed
        )?;
        let cols: Vec<String> = (1..=self.dim).map(|c| format!("w{c}")).collect();
        writeln!(w, "t,{}", cols.join(","))?;
        for k in 0..self.len() {
            let row: Vec<String> = self.point(k).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{}", self.grid.time(k), row.join(","))?;
        }
        Ok(())
    }
}
