//! Drift fields `b(t, x)`: a small catalog, composition, and Gaussian mollification.

mod norms;

pub use norms::{bessel_norm, lqp_norm, lqp_norm_on, NormKind, NormOptions, NormReport};

use std::f64::consts::{PI, SQRT_2};
use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

use crate::error::{Error, Result};
use crate::quad::GaussLegendre;

/// Default cap applied to singular catalog entries.
pub const DEFAULT_SINGULAR_CAP: f64 = 1e6;

/// Mollifier kernels are truncated at this many standard deviations.
pub const MOLLIFIER_TRUNCATION: f64 = 6.0;

/// Catalog entries and their compositions. Entries marked componentwise act on
/// each coordinate separately (`b_i(x) = g(x_i)`); the others are scalar
/// functions of the whole point, copied into every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    Zero,
    Constant {
        value: f64,
    },
    /// `-lambda * x`, componentwise.
    Linear {
        lambda: f64,
    },
    /// `sign(x)`, componentwise, with `sign(0) = 0`.
    Sign,
    /// `min(|x|^-gamma, cap)` on `|x| <= 1`, zero outside.
    TruncatedPower {
        gamma: f64,
        cap: f64,
    },
    /// `2 sign(x) sqrt(|x|)` on `|x| <= 1`, zero outside; componentwise.
    SqrtBranch,
    /// Indicator of the cells of a space-time checkerboard with even parity.
    Checkerboard {
        time_period: f64,
        space_period: f64,
    },
    /// `amplitude * exp(-|x - center|^2 / (2 width^2))`.
    GaussianBump {
        width: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default)]
        center: f64,
    },
    /// Indicator of `[0, inf)`, componentwise.
    HalfLine,
    /// Indicator of `[0,1] x [0,1]^d` in time and space.
    UnitBox,
    /// `x`, componentwise.
    Identity,
    /// `x^2 / 2` on `|x| <= window`, zero outside; componentwise.
    HalfSquare {
        window: f64,
    },
    Sum {
        terms: Vec<DriftSpec>,
    },
    Scale {
        factor: f64,
        inner: Box<DriftSpec>,
    },
    /// `cos(2 pi frequency t) * inner(t, x)`.
    Modulated {
        frequency: f64,
        inner: Box<DriftSpec>,
    },
    /// Componentwise absolute value.
    Abs {
        inner: Box<DriftSpec>,
    },
    /// Spatial convolution with a centered Gaussian of standard deviation `sigma`.
    Mollified {
        sigma: f64,
        inner: Box<DriftSpec>,
    },
}

fn one() -> f64 {
    1.0
}

/// How a mollified field is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MollifyRoute {
    /// Closed form where the catalog has one, quadrature otherwise.
    #[default]
    Auto,
    /// Always integrate against the truncated kernel.
    Quadrature,
}

#[inline]
fn gaussian_pdf(x: f64, sigma: f64) -> f64 {
    (-0.5 * (x / sigma).powi(2)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Standard normal distribution function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

impl DriftSpec {
    fn is_componentwise(&self) -> bool {
        use DriftSpec::*;
        match self {
            Zero | Constant { .. } | Linear { .. } | Sign | SqrtBranch | HalfLine | Identity | HalfSquare { .. } => true,
            TruncatedPower { .. } | Checkerboard { .. } | GaussianBump { .. } | UnitBox => false,
            Sum { terms } => terms.iter().all(Self::is_componentwise),
            Scale { inner, .. } | Modulated { inner, .. } | Abs { inner } | Mollified { inner, .. } => {
                inner.is_componentwise()
            }
        }
    }

    /// Scalar profile `g(t, y)` of a componentwise entry.
    fn component(&self, t: f64, y: f64, route: MollifyRoute) -> f64 {
        use DriftSpec::*;
        match self {
            Zero => 0.0,
            Constant { value } => *value,
            Linear { lambda } => -lambda * y,
            Sign => {
                if y > 0.0 {
                    1.0
                } else if y < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            SqrtBranch => {
                if y.abs() <= 1.0 {
                    2.0 * y.signum() * y.abs().sqrt() * (y != 0.0) as u8 as f64
                } else {
                    0.0
                }
            }
            HalfLine => (y >= 0.0) as u8 as f64,
            Identity => y,
            HalfSquare { window } => {
                if y.abs() <= *window {
                    0.5 * y * y
                } else {
                    0.0
                }
            }
            Sum { terms } => terms.iter().map(|s| s.component(t, y, route)).sum(),
            Scale { factor, inner } => factor * inner.component(t, y, route),
            Modulated { frequency, inner } => (2.0 * PI * frequency * t).cos() * inner.component(t, y, route),
            Abs { inner } => inner.component(t, y, route).abs(),
            Mollified { sigma, inner } => {
                if route == MollifyRoute::Auto {
                    if let Some(v) = inner.mollified_component_closed(t, y, *sigma) {
                        return v;
                    }
                }
                mollify_1d(*sigma, y, &inner.component_breakpoints(t), |z| inner.component(t, z, route))
            }
            TruncatedPower { .. } | Checkerboard { .. } | GaussianBump { .. } | UnitBox => {
                unreachable!("not componentwise")
            }
        }
    }

    /// Closed-form Gaussian convolution of a componentwise profile.
    fn mollified_component_closed(&self, t: f64, y: f64, sigma: f64) -> Option<f64> {
        use DriftSpec::*;
        Some(match self {
            Zero => 0.0,
            Constant { value } => *value,
            Linear { lambda } => -lambda * y,
            Identity => y,
            Sign => erf(y / (sigma * SQRT_2)),
            HalfLine => normal_cdf(y / sigma),
            Sum { terms } => {
                let mut s = 0.0;
                for term in terms {
                    s += term.mollified_component_closed(t, y, sigma)?;
                }
                s
            }
            Scale { factor, inner } => factor * inner.mollified_component_closed(t, y, sigma)?,
            Modulated { frequency, inner } => {
                (2.0 * PI * frequency * t).cos() * inner.mollified_component_closed(t, y, sigma)?
            }
            Mollified { sigma: s2, inner } => {
                inner.mollified_component_closed(t, y, (sigma * sigma + s2 * s2).sqrt())?
            }
            _ => return None,
        })
    }

    /// Derivative of the componentwise profile, where known in closed form.
    fn component_derivative(&self, t: f64, y: f64) -> Option<f64> {
        use DriftSpec::*;
        Some(match self {
            Zero | Constant { .. } => 0.0,
            Linear { lambda } => -lambda,
            Identity => 1.0,
            HalfSquare { window } => {
                if y.abs() < *window {
                    y
                } else if y.abs() > *window {
                    0.0
                } else {
                    return None;
                }
            }
            Sum { terms } => {
                let mut s = 0.0;
                for term in terms {
                    s += term.component_derivative(t, y)?;
                }
                s
            }
            Scale { factor, inner } => factor * inner.component_derivative(t, y)?,
            Modulated { frequency, inner } => (2.0 * PI * frequency * t).cos() * inner.component_derivative(t, y)?,
            Mollified { sigma, inner } => inner.mollified_component_derivative(t, y, *sigma),
            Sign | SqrtBranch | HalfLine | Abs { .. } => return None,
            TruncatedPower { .. } | Checkerboard { .. } | GaussianBump { .. } | UnitBox => return None,
        })
    }

    /// d/dy of the mollified profile: closed form or kernel-derivative quadrature.
    fn mollified_component_derivative(&self, t: f64, y: f64, sigma: f64) -> f64 {
        use DriftSpec::*;
        let closed = match self {
            Zero | Constant { .. } => Some(0.0),
            Linear { lambda } => Some(-lambda),
            Identity => Some(1.0),
            Sign => Some(2.0 * gaussian_pdf(y, sigma)),
            HalfLine => Some(gaussian_pdf(y, sigma)),
            _ => None,
        };
        if let Some(v) = closed {
            return v;
        }
        // (g * phi)' = g * phi'
        let bps = self.component_breakpoints(t);
        let h = MOLLIFIER_TRUNCATION * sigma;
        integrate_with_breaks(y - h, y + h, &bps, sigma, |z| {
            let u = y - z;
            self.component(t, z, MollifyRoute::Auto) * (-u / (sigma * sigma)) * gaussian_pdf(u, sigma) / truncated_mass()
        })
    }

    /// Points where a componentwise profile may jump or lose smoothness.
    fn component_breakpoints(&self, t: f64) -> Vec<f64> {
        use DriftSpec::*;
        match self {
            Sign | HalfLine => vec![0.0],
            SqrtBranch => vec![-1.0, 0.0, 1.0],
            HalfSquare { window } => vec![-window, *window],
            Sum { terms } => {
                let mut v: Vec<f64> = terms.iter().flat_map(|s| s.component_breakpoints(t)).collect();
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            }
            Scale { inner, .. } | Modulated { inner, .. } => inner.component_breakpoints(t),
            Abs { inner } => {
                let mut v = inner.component_breakpoints(t);
                v.push(0.0);
                v.sort_by(f64::total_cmp);
                v.dedup();
                v
            }
            _ => Vec::new(),
        }
    }

    /// Scalar value of a non-componentwise entry.
    fn scalar(&self, t: f64, x: &[f64], route: MollifyRoute) -> f64 {
        use DriftSpec::*;
        match self {
            TruncatedPower { gamma, cap } => {
                let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if r > 1.0 {
                    0.0
                } else if r == 0.0 {
                    *cap
                } else {
                    r.powf(-gamma).min(*cap)
                }
            }
            Checkerboard { time_period, space_period } => {
                let mut parity = (t / time_period).floor() as i64;
                for v in x {
                    parity += (v / space_period).floor() as i64;
                }
                (parity.rem_euclid(2) == 0) as u8 as f64
            }
            GaussianBump { width, amplitude, center } => {
                let r2: f64 = x.iter().map(|v| (v - center).powi(2)).sum();
                amplitude * (-0.5 * r2 / (width * width)).exp()
            }
            UnitBox => {
                let inside = (0.0..=1.0).contains(&t) && x.iter().all(|v| (0.0..=1.0).contains(v));
                inside as u8 as f64
            }
            _ => {
                let _ = route;
                unreachable!("componentwise entry")
            }
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        use DriftSpec::*;
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be > 0, got {v}")))
            }
        };
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::Parameter(format!("{name} must be finite, got {v}")))
            }
        };
        match self {
            Zero | Sign | SqrtBranch | HalfLine | UnitBox | Identity => Ok(()),
            Constant { value } => finite("value", *value),
            Linear { lambda } => finite("lambda", *lambda),
            TruncatedPower { gamma, cap } => {
                positive("cap", *cap)?;
                if !(gamma.is_finite() && *gamma >= 0.0) {
                    return Err(Error::Parameter(format!("gamma must be >= 0, got {gamma}")));
                }
                let _ = dim;
                Ok(())
            }
            Checkerboard { time_period, space_period } => {
                positive("time_period", *time_period)?;
                positive("space_period", *space_period)
            }
            GaussianBump { width, amplitude, center } => {
                positive("width", *width)?;
                finite("amplitude", *amplitude)?;
                finite("center", *center)
            }
            HalfSquare { window } => positive("window", *window),
            Sum { terms } => terms.iter().try_for_each(|s| s.validate(dim)),
            Scale { factor, inner } => {
                finite("factor", *factor)?;
                inner.validate(dim)
            }
            Modulated { frequency, inner } => {
                finite("frequency", *frequency)?;
                inner.validate(dim)
            }
            Abs { inner } => inner.validate(dim),
            Mollified { sigma, inner } => {
                positive("sigma", *sigma)?;
                if !inner.is_componentwise() && dim > 3 {
                    return Err(Error::Unsupported(format!(
                        "quadrature mollification of scalar entries is limited to d <= 3, got d={dim}"
                    )));
                }
                inner.validate(dim)
            }
        }
    }

    fn is_smooth(&self) -> bool {
        use DriftSpec::*;
        match self {
            Zero | Constant { .. } | Linear { .. } | Identity | GaussianBump { .. } | Mollified { .. } => true,
            Sum { terms } => terms.iter().all(Self::is_smooth),
            Scale { inner, .. } | Modulated { inner, .. } => inner.is_smooth(),
            // smooth on the interior of its window, which is all the gradient code needs
            HalfSquare { .. } => true,
            Sign | SqrtBranch | HalfLine | Abs { .. } | TruncatedPower { .. } | Checkerboard { .. } | UnitBox => {
                false
            }
        }
    }

    fn support_radius(&self) -> Option<f64> {
        use DriftSpec::*;
        match self {
            Zero => Some(0.0),
            TruncatedPower { .. } | SqrtBranch | UnitBox => Some(1.0),
            HalfSquare { window } => Some(*window),
            GaussianBump { width, center, .. } => Some(center.abs() + 10.0 * width),
            Constant { value } if *value == 0.0 => Some(0.0),
            Sum { terms } => terms
                .iter()
                .map(Self::support_radius)
                .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r))),
            Scale { inner, .. } | Modulated { inner, .. } | Abs { inner } => inner.support_radius(),
            Mollified { sigma, inner } => inner.support_radius().map(|r| r + MOLLIFIER_TRUNCATION * sigma),
            _ => None,
        }
    }
}

/// Gaussian quadrature over `[lo, hi]` split at `breaks`, with panels no wider than `scale`.
fn integrate_with_breaks<F: FnMut(f64) -> f64>(lo: f64, hi: f64, breaks: &[f64], scale: f64, mut f: F) -> f64 {
    thread_local! {
        static RULE: GaussLegendre = GaussLegendre::new(12);
    }
    let mut cuts = vec![lo];
    cuts.extend(breaks.iter().copied().filter(|b| *b > lo && *b < hi));
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    RULE.with(|rule| {
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let len = w[1] - w[0];
            if len <= 0.0 {
                continue;
            }
            let panels = ((len / scale).ceil() as usize).max(1);
            total += rule.composite(w[0], w[1], panels, &mut f);
        }
        total
    })
}

/// `(g * phi_sigma)(y)` by quadrature over `z` in `y +- 6 sigma`.
fn mollify_1d<G: Fn(f64) -> f64>(sigma: f64, y: f64, breaks: &[f64], g: G) -> f64 {
    let h = MOLLIFIER_TRUNCATION * sigma;
    integrate_with_breaks(y - h, y + h, breaks, sigma, |z| g(z) * gaussian_pdf(y - z, sigma)) / truncated_mass()
}

/// Mass of the standard Gaussian on `[-6, 6]`; truncated kernels are renormalized by it.
fn truncated_mass() -> f64 {
    erf(MOLLIFIER_TRUNCATION / SQRT_2)
}

/// An integrability exponent in `(2, inf]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exponent(pub f64);

impl Exponent {
    pub const INFINITY: Exponent = Exponent(f64::INFINITY);

    pub fn reciprocal(self) -> f64 {
        if self.0.is_infinite() {
            0.0
        } else {
            1.0 / self.0
        }
    }
}

impl Serialize for Exponent {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Exponent {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Exponent(v)),
            Raw::Str(s) if s == "inf" || s == "infinity" => Ok(Exponent::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad exponent {s:?}"))),
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() {
            write!(f, "inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

/// Which hypothesis of the stability theorem a parameter set satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StabilityCondition {
    /// `nu in [0, 1 - 2/q)` and `d/p + 2/q + nu < 2`.
    LowRegularity,
    /// `nu in [1 - 2/q, 1]`, `d/p + 4/q < 3 - 2 nu` and `d/p < nu`.
    HighRegularity,
}

pub fn subcritical(p: Exponent, q: Exponent, dim: usize) -> bool {
    2.0 * q.reciprocal() + dim as f64 * p.reciprocal() < 1.0
}

/// Classify `(p, q, d, nu)`; `Err` names the violated inequalities.
pub fn stability_condition(p: Exponent, q: Exponent, dim: usize, nu: f64) -> Result<StabilityCondition> {
    let (ip, iq, d) = (p.reciprocal(), q.reciprocal(), dim as f64);
    let edge = 1.0 - 2.0 * iq;
    if (0.0..edge).contains(&nu) {
        if d * ip + 2.0 * iq + nu < 2.0 {
            return Ok(StabilityCondition::LowRegularity);
        }
        return Err(Error::Precondition(format!(
            "d/p + 2/q + nu = {} is not < 2",
            d * ip + 2.0 * iq + nu
        )));
    }
    if (edge..=1.0).contains(&nu) {
        if d * ip + 4.0 * iq >= 3.0 - 2.0 * nu {
            return Err(Error::Precondition(format!(
                "d/p + 4/q = {} is not < 3 - 2 nu = {}",
                d * ip + 4.0 * iq,
                3.0 - 2.0 * nu
            )));
        }
        if d * ip >= nu {
            return Err(Error::Precondition(format!("d/p = {} is not < nu = {nu}", d * ip)));
        }
        return Ok(StabilityCondition::HighRegularity);
    }
    Err(Error::Precondition(format!("nu = {nu} outside [0, 1]")))
}

/// A drift `b: [0,T] x R^d -> R^d` with declared integrability exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftField {
    pub spec: DriftSpec,
    pub dim: usize,
    pub p: Exponent,
    pub q: Exponent,
    #[serde(default)]
    pub route: MollifyRoute,
}

impl DriftField {
    pub fn new(spec: DriftSpec, dim: usize, p: Exponent, q: Exponent) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Parameter("dimension must be >= 1".into()));
        }
        for (name, e) in [("p", p), ("q", q)] {
            if !(e.0 > 2.0) {
                return Err(Error::Parameter(format!("{name} must lie in (2, inf], got {e}")));
            }
        }
        spec.validate(dim)?;
        if let DriftSpec::TruncatedPower { gamma, .. } = spec {
            // local p-integrability of |x|^-gamma in d dimensions
            if !(gamma * p.reciprocal().recip() < dim as f64) {
                return Err(Error::Parameter(format!(
                    "truncated power needs gamma * p < d, got gamma={gamma}, p={p}, d={dim}"
                )));
            }
        }
        Ok(Self {
            spec,
            dim,
            p,
            q,
            route: MollifyRoute::Auto,
        })
    }

    pub fn with_route(mut self, route: MollifyRoute) -> Self {
        self.route = route;
        self
    }

    /// `2/q + d/p < 1`.
    pub fn is_subcritical(&self) -> bool {
        subcritical(self.p, self.q, self.dim)
    }

    pub fn is_smooth(&self) -> bool {
        self.spec.is_smooth()
    }

    /// Half-width of a box `[-r, r]^d` containing the support, if bounded.
    pub fn support_radius(&self) -> Option<f64> {
        self.spec.support_radius()
    }

    pub fn name(&self) -> String {
        serde_json::to_string(&self.spec).unwrap_or_else(|_| "drift".into())
    }

    /// `b(t, x)` into `out`.
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        eval_spec(&self.spec, t, x, out, self.route);
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, x, &mut out);
        out
    }

    /// First component at a scalar point; the hot path for `d = 1`.
    #[inline]
    pub fn eval1(&self, t: f64, x: f64) -> f64 {
        eval_spec_1d(&self.spec, t, x, self.route)
    }

    /// Checked evaluation reporting the point of any non-finite value.
    pub fn try_eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.eval_into(t, x, out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Evaluation {
                field: self.name(),
                t,
                x: x.to_vec(),
            })
        }
    }

    /// Spatial gradient of the first component. Analytic where available,
    /// central differences otherwise; non-smooth fields are rejected.
    pub fn gradient_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if !self.is_smooth() {
            return Err(Error::Precondition(format!(
                "gradient of a non-smooth drift {}; mollify it first",
                self.name()
            )));
        }
        gradient_spec(&self.spec, t, x, out, self.route);
        Ok(())
    }

    /// Derivative of the first component for `d = 1`.
    pub fn gradient1(&self, t: f64, x: f64) -> Result<f64> {
        let mut out = [0.0];
        self.gradient_into(t, &[x], &mut out)?;
        Ok(out[0])
    }

    /// Unchecked derivative for hot loops; callers check [`DriftField::is_smooth`] once.
    #[inline]
    pub(crate) fn gradient1_unchecked(&self, t: f64, x: f64) -> f64 {
        gradient_spec_1d(&self.spec, t, x, self.route)
    }
}

fn eval_spec(spec: &DriftSpec, t: f64, x: &[f64], out: &mut [f64], route: MollifyRoute) {
    use DriftSpec::*;
    if spec.is_componentwise() {
        for (o, &xi) in out.iter_mut().zip(x) {
            *o = spec.component(t, xi, route);
        }
        return;
    }
    match spec {
        Sum { terms } => {
            out.iter_mut().for_each(|o| *o = 0.0);
            let mut tmp = vec![0.0; out.len()];
            for term in terms {
                eval_spec(term, t, x, &mut tmp, route);
                out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
            }
        }
        Scale { factor, inner } => {
            eval_spec(inner, t, x, out, route);
            out.iter_mut().for_each(|o| *o *= factor);
        }
        Modulated { frequency, inner } => {
            eval_spec(inner, t, x, out, route);
            let m = (2.0 * PI * frequency * t).cos();
            out.iter_mut().for_each(|o| *o *= m);
        }
        Abs { inner } => {
            eval_spec(inner, t, x, out, route);
            out.iter_mut().for_each(|o| *o = o.abs());
        }
        Mollified { sigma, inner } => {
            if route == MollifyRoute::Auto {
                if let Some(v) = mollified_scalar_closed(inner, t, x, *sigma) {
                    out.iter_mut().for_each(|o| *o = v);
                    return;
                }
            }
            mollify_nd(inner, t, x, *sigma, out, route);
        }
        _ => {
            let v = spec.scalar(t, x, route);
            out.iter_mut().for_each(|o| *o = v);
        }
    }
}

#[inline]
fn eval_spec_1d(spec: &DriftSpec, t: f64, x: f64, route: MollifyRoute) -> f64 {
    if spec.is_componentwise() {
        return spec.component(t, x, route);
    }
    let mut out = [0.0];
    eval_spec(spec, t, &[x], &mut out, route);
    out[0]
}

fn mollified_scalar_closed(inner: &DriftSpec, _t: f64, x: &[f64], sigma: f64) -> Option<f64> {
    match inner {
        DriftSpec::GaussianBump { width, amplitude, center } => {
            let s2 = width * width + sigma * sigma;
            let r2: f64 = x.iter().map(|v| (v - center).powi(2)).sum();
            let shrink = (width * width / s2).powf(x.len() as f64 / 2.0);
            Some(amplitude * shrink * (-0.5 * r2 / s2).exp())
        }
        _ => None,
    }
}

/// Tensor-product quadrature of a mollified non-componentwise field (d <= 3).
fn mollify_nd(inner: &DriftSpec, t: f64, x: &[f64], sigma: f64, out: &mut [f64], route: MollifyRoute) {
    let d = x.len();
    let rule = GaussLegendre::new(if d == 1 { 12 } else { 8 });
    let h = MOLLIFIER_TRUNCATION * sigma;
    let panels = if d == 1 { 12 } else { 6 };
    // 1-D nodes and weights (weights include the Gaussian factor)
    let mut nodes = Vec::new();
    let width = 2.0 * h / panels as f64;
    for p in 0..panels {
        let mid = -h + (p as f64 + 0.5) * width;
        for (z, w) in rule.nodes.iter().zip(&rule.weights) {
            let u = mid + 0.5 * width * z;
            nodes.push((u, 0.5 * width * w * gaussian_pdf(u, sigma)));
        }
    }
    let mass: f64 = nodes.iter().map(|n| n.1).sum();
    nodes.iter_mut().for_each(|n| n.1 /= mass);
    let n = nodes.len();
    let mut acc = vec![0.0; out.len()];
    let mut tmp = vec![0.0; out.len()];
    let mut point = vec![0.0; d];
    let mut idx = vec![0usize; d];
    loop {
        let mut w = 1.0;
        for k in 0..d {
            point[k] = x[k] - nodes[idx[k]].0;
            w *= nodes[idx[k]].1;
        }
        eval_spec(inner, t, &point, &mut tmp, route);
        acc.iter_mut().zip(&tmp).for_each(|(a, v)| *a += w * v);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == d {
                out.copy_from_slice(&acc);
                return;
            }
        }
    }
}

fn gradient_spec(spec: &DriftSpec, t: f64, x: &[f64], out: &mut [f64], route: MollifyRoute) {
    use DriftSpec::*;
    out.iter_mut().for_each(|o| *o = 0.0);
    if spec.is_componentwise() {
        // first component depends on x_0 only
        out[0] = component_gradient(spec, t, x[0], route);
        return;
    }
    match spec {
        GaussianBump { width, amplitude, center } => {
            let r2: f64 = x.iter().map(|v| (v - center).powi(2)).sum();
            let f = amplitude * (-0.5 * r2 / (width * width)).exp();
            for (o, v) in out.iter_mut().zip(x) {
                *o = -(v - center) / (width * width) * f;
            }
        }
        Mollified { sigma, inner } if matches!(**inner, GaussianBump { .. }) => {
            if let GaussianBump { width, amplitude, center } = **inner {
                let s2 = width * width + sigma * sigma;
                let r2: f64 = x.iter().map(|v| (v - center).powi(2)).sum();
                let f = amplitude * (width * width / s2).powf(x.len() as f64 / 2.0) * (-0.5 * r2 / s2).exp();
                for (o, v) in out.iter_mut().zip(x) {
                    *o = -(v - center) / s2 * f;
                }
            }
        }
        Sum { terms } => {
            let mut tmp = vec![0.0; out.len()];
            for term in terms {
                gradient_spec(term, t, x, &mut tmp, route);
                out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
            }
        }
        Scale { factor, inner } => {
            gradient_spec(inner, t, x, out, route);
            out.iter_mut().for_each(|o| *o *= factor);
        }
        Modulated { frequency, inner } => {
            gradient_spec(inner, t, x, out, route);
            let m = (2.0 * PI * frequency * t).cos();
            out.iter_mut().for_each(|o| *o *= m);
        }
        _ => central_difference(spec, t, x, out, route),
    }
}

fn component_gradient(spec: &DriftSpec, t: f64, y: f64, route: MollifyRoute) -> f64 {
    if route == MollifyRoute::Auto {
        if let Some(v) = spec.component_derivative(t, y) {
            return v;
        }
    } else if let DriftSpec::Mollified { sigma, inner } = spec {
        let bps = inner.component_breakpoints(t);
        let h = MOLLIFIER_TRUNCATION * sigma;
        return integrate_with_breaks(y - h, y + h, &bps, *sigma, |z| {
            let u = y - z;
            inner.component(t, z, route) * (-u / (sigma * sigma)) * gaussian_pdf(u, *sigma) / truncated_mass()
        });
    }
    let e = 1e-5 * (1.0 + y.abs());
    (spec.component(t, y + e, route) - spec.component(t, y - e, route)) / (2.0 * e)
}

fn central_difference(spec: &DriftSpec, t: f64, x: &[f64], out: &mut [f64], route: MollifyRoute) {
    let d = x.len();
    let mut xp = x.to_vec();
    let mut a = vec![0.0; d];
    let mut b = vec![0.0; d];
    for k in 0..d {
        let e = 1e-5 * (1.0 + x[k].abs());
        xp[k] = x[k] + e;
        eval_spec(spec, t, &xp, &mut a, route);
        xp[k] = x[k] - e;
        eval_spec(spec, t, &xp, &mut b, route);
        xp[k] = x[k];
        out[k] = (a[0] - b[0]) / (2.0 * e);
    }
}

#[inline]
fn gradient_spec_1d(spec: &DriftSpec, t: f64, x: f64, route: MollifyRoute) -> f64 {
    if spec.is_componentwise() {
        return component_gradient(spec, t, x, route);
    }
    let mut out = [0.0];
    gradient_spec(spec, t, &[x], &mut out, route);
    out[0]
}

/// Gaussian mollification `f * phi_sigma` in space.
pub fn mollify(f: &DriftField, sigma: f64) -> Result<DriftField> {
    let spec = DriftSpec::Mollified {
        sigma,
        inner: Box::new(f.spec.clone()),
    };
    spec.validate(f.dim)?;
    Ok(DriftField {
        spec,
        dim: f.dim,
        p: f.p,
        q: f.q,
        route: f.route,
    })
}

/// Parameters of [`make_drift`], as read from a JSON object.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DriftParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Exponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Exponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_period: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<f64>,
    /// Mollify the catalog entry with this width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

/// Build a catalog drift by name. Unknown names and invalid parameters are rejected.
pub fn make_drift(kind: &str, params: &DriftParams) -> Result<DriftField> {
    let need = |name: &str, v: Option<f64>| v.ok_or_else(|| Error::Parameter(format!("{kind} needs `{name}`")));
    let spec = match kind {
        "zero" => DriftSpec::Zero,
        "constant" => DriftSpec::Constant {
            value: need("value", params.value)?,
        },
        "linear" => DriftSpec::Linear {
            lambda: params.lambda.unwrap_or(1.0),
        },
        "sign" => DriftSpec::Sign,
        "truncated_power" => DriftSpec::TruncatedPower {
            gamma: need("gamma", params.gamma)?,
            cap: params.cap.unwrap_or(DEFAULT_SINGULAR_CAP),
        },
        "sqrt_branch" => DriftSpec::SqrtBranch,
        "checkerboard" => DriftSpec::Checkerboard {
            time_period: params.time_period.unwrap_or(0.25),
            space_period: params.space_period.unwrap_or(0.5),
        },
        "gaussian_bump" => DriftSpec::GaussianBump {
            width: need("width", params.width)?,
            amplitude: params.amplitude.unwrap_or(1.0),
            center: params.center.unwrap_or(0.0),
        },
        "half_line" => DriftSpec::HalfLine,
        "unit_box" => DriftSpec::UnitBox,
        "identity" => DriftSpec::Identity,
        "half_square" => DriftSpec::HalfSquare {
            window: params.window.unwrap_or(8.0),
        },
        other => return Err(Error::Parameter(format!("unknown drift kind `{other}`"))),
    };
    let field = DriftField::new(
        spec,
        params.dim.unwrap_or(1),
        params.p.unwrap_or(Exponent(4.0)),
        params.q.unwrap_or(Exponent(4.0)),
    )?;
    match params.sigma {
        Some(s) => mollify(&field, s),
        None => Ok(field),
    }
}

impl DriftSpec {
    fn hints(&self, breaks: &mut Vec<f64>) -> f64 {
        use DriftSpec::*;
        match self {
            Zero | Constant { .. } | Linear { .. } | Identity | Checkerboard { .. } => f64::INFINITY,
            Sign | HalfLine => {
                breaks.push(0.0);
                f64::INFINITY
            }
            SqrtBranch | TruncatedPower { .. } => {
                breaks.extend([-1.0, 0.0, 1.0]);
                f64::INFINITY
            }
            UnitBox => {
                breaks.extend([0.0, 1.0]);
                f64::INFINITY
            }
            HalfSquare { window } => {
                breaks.extend([-window, *window]);
                f64::INFINITY
            }
            GaussianBump { width, center, .. } => {
                breaks.extend((-8..=8).map(|k| center + k as f64 * width));
                *width
            }
            Sum { terms } => terms.iter().map(|t| t.hints(breaks)).fold(f64::INFINITY, f64::min),
            Scale { inner, .. } | Modulated { inner, .. } | Abs { inner } => inner.hints(breaks),
            Mollified { sigma, inner } => {
                let mut own = Vec::new();
                let scale = inner.hints(&mut own);
                for b in own {
                    breaks.extend((-6..=6).map(|k| b + k as f64 * sigma));
                }
                scale.min(*sigma)
            }
        }
    }
}

impl DriftField {
    /// Points where a one-dimensional profile changes character, and the
    /// smallest length scale it varies on; used to lay out quadrature panels.
    pub fn quadrature_hints(&self) -> (Vec<f64>, f64) {
        let mut breaks = Vec::new();
        let scale = self.spec.hints(&mut breaks);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        (breaks, scale)
    }
}

impl DriftField {
    pub fn zero(dim: usize) -> Self {
        Self::new(DriftSpec::Zero, dim, Exponent(4.0), Exponent(4.0)).expect("zero drift is valid")
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            spec: DriftSpec::Scale {
                factor,
                inner: Box::new(self.spec.clone()),
            },
            ..self.clone()
        }
    }

    pub fn plus(&self, other: &DriftField) -> Self {
        Self {
            spec: DriftSpec::Sum {
                terms: vec![self.spec.clone(), other.spec.clone()],
            },
            ..self.clone()
        }
    }

    pub fn abs(&self) -> Self {
        Self {
            spec: DriftSpec::Abs {
                inner: Box::new(self.spec.clone()),
            },
            ..self.clone()
        }
    }

    pub fn modulated(&self, frequency: f64) -> Self {
        Self {
            spec: DriftSpec::Modulated {
                frequency,
                inner: Box::new(self.spec.clone()),
            },
            ..self.clone()
        }
    }
}
