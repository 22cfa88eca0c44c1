//! Small statistics helpers: medians, least squares, sample moments.

use serde::{Deserialize, Serialize};

/// Result of a straight-line fit `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; NaN with fewer than three points.
    pub slope_se: f64,
    pub r_squared: f64,
    pub max_residual: f64,
}

/// Weighted least squares; `weights` may be empty for an unweighted fit.
pub fn fit_line(xs: &[f64], ys: &[f64], weights: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n || !(weights.is_empty() || weights.len() == n) {
        return None;
    }
    let w = |i: usize| if weights.is_empty() { 1.0 } else { weights[i] };
    let sw: f64 = (0..n).map(w).sum();
    let mx = (0..n).map(|i| w(i) * xs[i]).sum::<f64>() / sw;
    let my = (0..n).map(|i| w(i) * ys[i]).sum::<f64>() / sw;
    let sxx: f64 = (0..n).map(|i| w(i) * (xs[i] - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = (0..n).map(|i| w(i) * (xs[i] - mx) * (ys[i] - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let resid: Vec<f64> = (0..n).map(|i| ys[i] - intercept - slope * xs[i]).collect();
    let ss_res: f64 = (0..n).map(|i| w(i) * resid[i].powi(2)).sum();
    let ss_tot: f64 = (0..n).map(|i| w(i) * (ys[i] - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let slope_se = if n > 2 {
        // weights act as relative precisions; the ratio is scale-free
        (ss_res / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some(LineFit {
        slope,
        intercept,
        slope_se,
        r_squared,
        max_residual: resid.iter().fold(0.0f64, |m, r| m.max(r.abs())),
    })
}

/// Two-regressor least squares `y = c + a u + b v`; returns `(c, a, b, r^2)`.
pub fn fit_plane(us: &[f64], vs: &[f64], ys: &[f64]) -> Option<(f64, f64, f64, f64)> {
    let n = ys.len();
    if n < 3 || us.len() != n || vs.len() != n {
        return None;
    }
    let mean = |a: &[f64]| a.iter().sum::<f64>() / n as f64;
    let (mu, mv, my) = (mean(us), mean(vs), mean(ys));
    let (mut suu, mut svv, mut suv, mut suy, mut svy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let (u, v, y) = (us[i] - mu, vs[i] - mv, ys[i] - my);
        suu += u * u;
        svv += v * v;
        suv += u * v;
        suy += u * y;
        svy += v * y;
        syy += y * y;
    }
    let det = suu * svv - suv * suv;
    if !(det.abs() > 1e-12 * (suu * svv).max(1e-300)) {
        return None;
    }
    let a = (suy * svv - svy * suv) / det;
    let b = (svy * suu - suy * suv) / det;
    let c = my - a * mu - b * mv;
    let ss_res: f64 = (0..n).map(|i| (ys[i] - c - a * us[i] - b * vs[i]).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Some((c, a, b, r2))
}

/// Median of a non-empty sample (average of the middle pair for even sizes).
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Running mean and variance (Welford), mergeable across chunks.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Self::default();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }
}

/// `(mean, standard error)` of `E|X|^m` and the delta-method standard error of
/// its `m`-th root, from samples of `X`.
pub fn root_moment(samples: &[f64], m: f64) -> (f64, f64) {
    let powered: Vec<f64> = samples.iter().map(|x| x.abs().powf(m)).collect();
    let mom = Moments::from_slice(&powered);
    if mom.mean <= 0.0 {
        return (0.0, 0.0);
    }
    let root = mom.mean.powf(1.0 / m);
    let se = root / (m * mom.mean) * mom.std_error();
    (root, se)
}
