//! Mixed Lebesgue and Bessel-potential norms of drift fields on a box.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{DriftField, Exponent};
use crate::error::{Error, Result};

/// Which norm a [`NormReport`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Lebesgue,
    Bessel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormOptions {
    /// Midpoint cells per unit time.
    pub time_cells: usize,
    /// Midpoint cells per spatial axis.
    pub space_cells: usize,
}

impl Default for NormOptions {
    fn default() -> Self {
        Self {
            time_cells: 64,
            space_cells: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub kind: NormKind,
    pub value: f64,
    /// Difference to the same rule at half resolution.
    pub quadrature_error: f64,
    pub p: Exponent,
    pub q: Exponent,
    pub horizon: f64,
    pub radius: f64,
    /// Set when the field's support is not known to lie inside the box.
    pub support_warning: Option<String>,
}

fn combine(values: &[f64], weight: f64, e: Exponent) -> f64 {
    if e.0.is_infinite() {
        values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else {
        (values.iter().map(|v| v.abs().powf(e.0)).sum::<f64>() * weight).powf(1.0 / e.0)
    }
}

#[allow(clippy::too_many_arguments)]
fn lqp_at(
    f: &DriftField,
    start: f64,
    horizon: f64,
    radius: f64,
    p: Exponent,
    q: Exponent,
    nt: usize,
    nx: usize,
) -> Result<f64> {
    let d = f.dim;
    let total = nx
        .checked_pow(d as u32)
        .filter(|n| *n <= 1 << 24)
        .ok_or(Error::Resource {
            what: "spatial quadrature cells",
            requested: (nx as u128).pow(d as u32),
            cap: 1 << 24,
        })?;
    let hx = 2.0 * radius / nx as f64;
    let ht = horizon / nt as f64;
    let cell = hx.powi(d as i32);
    let mut point = vec![0.0; d];
    let mut value = vec![0.0; d];
    let mut spatial = vec![0.0; total];
    let mut per_time = Vec::with_capacity(nt);
    for it in 0..nt {
        let t = start + (it as f64 + 0.5) * ht;
        for (flat, slot) in spatial.iter_mut().enumerate() {
            let mut rest = flat;
            for c in point.iter_mut() {
                *c = -radius + ((rest % nx) as f64 + 0.5) * hx;
                rest /= nx;
            }
            f.try_eval_into(t, &point, &mut value)?;
            *slot = value.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        per_time.push(combine(&spatial, cell, p));
    }
    Ok(combine(&per_time, ht, q))
}

fn support_warning(f: &DriftField, radius: f64) -> Option<String> {
    match f.support_radius() {
        Some(r) if r <= radius => None,
        Some(r) => Some(format!("support radius {r} exceeds box radius {radius}; norm is truncated")),
        None => Some(format!("support is unbounded; norm is taken over the box of radius {radius}")),
    }
}

/// `(int_0^T (int_{[-R,R]^d} |f(t,x)|^p dx)^{q/p} dt)^{1/q}` by composite midpoint
/// rules; infinite exponents become maxima over the midpoints.
pub fn lqp_norm(
    f: &DriftField,
    horizon: f64,
    radius: f64,
    p: Exponent,
    q: Exponent,
    opts: NormOptions,
) -> Result<NormReport> {
    lqp_norm_on(f, 0.0, horizon, radius, p, q, opts)
}

/// [`lqp_norm`] over the time window `[s, t]`.
pub fn lqp_norm_on(
    f: &DriftField,
    s: f64,
    t: f64,
    radius: f64,
    p: Exponent,
    q: Exponent,
    opts: NormOptions,
) -> Result<NormReport> {
    let horizon = t - s;
    if !(horizon > 0.0 && radius > 0.0) {
        return Err(Error::Parameter(format!("need s < t and R > 0, got [{s}, {t}], {radius}")));
    }
    let nt = ((opts.time_cells as f64 * horizon).ceil() as usize).max(2);
    let nx = opts.space_cells.max(2) & !1;
    let fine = lqp_at(f, s, horizon, radius, p, q, nt, nx)?;
    let coarse = lqp_at(f, s, horizon, radius, p, q, (nt / 2).max(1), nx / 2)?;
    Ok(NormReport {
        kind: NormKind::Lebesgue,
        value: fine,
        quadrature_error: (fine - coarse).abs(),
        p,
        q,
        horizon,
        radius,
        support_warning: support_warning(f, radius),
    })
}

/// `L^q_t` of `||(1 - Laplacian)^{nu/2} f(t, .)||_{L^p}` for `d = 1`, computed with
/// an FFT on a periodic grid over `[-R, R]`.
pub fn bessel_norm(
    f: &DriftField,
    horizon: f64,
    radius: f64,
    nu: f64,
    p: Exponent,
    q: Exponent,
    opts: NormOptions,
) -> Result<NormReport> {
    if f.dim != 1 {
        return Err(Error::Unsupported(format!("Bessel norms are implemented for d = 1, got d = {}", f.dim)));
    }
    if !(horizon > 0.0 && radius > 0.0) {
        return Err(Error::Parameter(format!("need T > 0 and R > 0, got {horizon}, {radius}")));
    }
    let nt = ((opts.time_cells as f64 * horizon).ceil() as usize).max(2);
    let run = |nt: usize, nx: usize| -> Result<f64> {
        let hx = 2.0 * radius / nx as f64;
        let ht = horizon / nt as f64;
        let mut planner = FftPlanner::<f64>::new();
        let fwd = planner.plan_fft_forward(nx);
        let inv = planner.plan_fft_inverse(nx);
        let mut buf = vec![Complex::new(0.0, 0.0); nx];
        let mut per_time = Vec::with_capacity(nt);
        let mut value = [0.0];
        for it in 0..nt {
            let t = (it as f64 + 0.5) * ht;
            for (k, slot) in buf.iter_mut().enumerate() {
                let x = -radius + (k as f64 + 0.5) * hx;
                f.try_eval_into(t, &[x], &mut value)?;
                *slot = Complex::new(value[0], 0.0);
            }
            fwd.process(&mut buf);
            for (k, c) in buf.iter_mut().enumerate() {
                let m = if k <= nx / 2 { k as f64 } else { k as f64 - nx as f64 };
                let xi = std::f64::consts::PI * m / radius;
                *c *= (1.0 + xi * xi).powf(nu / 2.0) / nx as f64;
            }
            inv.process(&mut buf);
            let vals: Vec<f64> = buf.iter().map(|c| c.re).collect();
            per_time.push(combine(&vals, hx, p));
        }
        Ok(combine(&per_time, ht, q))
    };
    let nx = opts.space_cells.max(4).next_power_of_two();
    let fine = run(nt, nx)?;
    let coarse = run((nt / 2).max(1), nx / 2)?;
    Ok(NormReport {
        kind: NormKind::Bessel,
        value: fine,
        quadrature_error: (fine - coarse).abs(),
        p,
        q,
        horizon,
        radius,
        support_warning: support_warning(f, radius),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{make_drift, DriftParams, DriftSpec};
    use approx::assert_relative_eq;

    #[test]
    fn constant_norm_is_volume_power() {
        let f = make_drift("constant", &DriftParams { value: Some(2.0), ..Default::default() }).unwrap();
        let r = lqp_norm(&f, 1.0, 1.0, Exponent(4.0), Exponent(4.0), NormOptions::default()).unwrap();
        // (int_0^1 (2 * 2^4)^{1} dt)^{1/4} = 2 * 2^{1/4}
        assert_relative_eq!(r.value, 2.0 * 2f64.powf(0.25), epsilon = 1e-12);
        assert!(r.support_warning.is_some());
    }

    #[test]
    fn infinite_exponents_give_the_maximum() {
        let f = make_drift("gaussian_bump", &DriftParams { width: Some(0.3), ..Default::default() }).unwrap();
        let r = lqp_norm(&f, 1.0, 4.0, Exponent::INFINITY, Exponent::INFINITY, NormOptions::default()).unwrap();
        assert!(r.value <= 1.0 && r.value > 0.999);
        assert!(r.support_warning.is_none());
    }

    #[test]
    fn gaussian_l2_norm_matches_closed_form() {
        // int exp(-x^2/w^2) dx = w sqrt(pi)
        let w = 0.3;
        let f = DriftField::new(
            DriftSpec::GaussianBump { width: w, amplitude: 1.0, center: 0.0 },
            1,
            Exponent(4.0),
            Exponent(4.0),
        )
        .unwrap();
        let r = lqp_norm(&f, 1.0, 5.0, Exponent(4.0), Exponent(4.0), NormOptions::default()).unwrap();
        let exact = (w * (std::f64::consts::PI / 2.0).sqrt()).powf(0.25);
        assert_relative_eq!(r.value, exact, epsilon = 1e-8);
        assert!(r.quadrature_error < 1e-6);
    }

    #[test]
    fn bessel_norm_of_order_zero_is_lebesgue() {
        let f = make_drift("gaussian_bump", &DriftParams { width: Some(0.4), ..Default::default() }).unwrap();
        let opts = NormOptions { time_cells: 4, space_cells: 512 };
        let b = bessel_norm(&f, 1.0, 6.0, 0.0, Exponent(4.0), Exponent(4.0), opts).unwrap();
        let l = lqp_norm(&f, 1.0, 6.0, Exponent(4.0), Exponent(4.0), opts).unwrap();
        assert_relative_eq!(b.value, l.value, epsilon = 1e-9);
        let b1 = bessel_norm(&f, 1.0, 6.0, 1.0, Exponent(4.0), Exponent(4.0), opts).unwrap();
        assert!(b1.value > b.value);
    }

    #[test]
    fn nonfinite_values_are_reported() {
        let f = DriftField::new(
            DriftSpec::Constant { value: 1.0 },
            1,
            Exponent(4.0),
            Exponent(4.0),
        )
        .unwrap()
        .scaled(f64::INFINITY);
        let err = lqp_norm(&f, 1.0, 1.0, Exponent(4.0), Exponent(4.0), NormOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Evaluation { .. }));
    }
}
