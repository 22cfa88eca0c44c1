//! Library oracles and estimators against closed forms derived by hand.

use approx::assert_relative_eq;
use regnoise::fields::{make_drift, normal_cdf, DriftParams};
use regnoise::verify::{
    brownian_sup_moment, brownian_sup_tail, mc_difference_moment, mc_krylov_moment, oracle_first_moment,
    oracle_second_moment, Ensemble, OracleRoute,
};
use regnoise::Backend;

/// `E exp(-W_r^2 / (2 d^2)) = d / sqrt(d^2 + r)`, integrated in `r`.
fn bump_mean_integral(d: f64, s: f64, t: f64) -> f64 {
    2.0 * d * ((d * d + t).sqrt() - (d * d + s).sqrt())
}

#[test]
fn first_moment_of_centered_bump() {
    for (d, s, t) in [(1.0, 0.0, 1.0), (0.05, 0.1, 0.6), (1.0 / 256.0, 0.0, 1.0 / 1024.0)] {
        let f = make_drift("gaussian_bump", &DriftParams { width: Some(d), ..Default::default() }).unwrap();
        let o = oracle_first_moment(&f, s, t).unwrap();
        assert_relative_eq!(o.value, bump_mean_integral(d, s, t), max_relative = 1e-8);
    }
}

#[test]
fn second_moment_of_time_integrated_brownian_motion() {
    // f = x^2 / 2 on a wide window, so f' = x and the moment is
    // int int min(r, u) over [s, t]^2 = (t^3 - s^3) / 3 - s^2 (t - s)
    let f = make_drift("half_square", &DriftParams { window: Some(12.0), ..Default::default() }).unwrap();
    for (s, t) in [(0.0, 1.0), (0.25, 0.75)] {
        let o = oracle_second_moment(&f, s, t, OracleRoute::Quadrature).unwrap();
        let exact = (t * t * t - s * s * s) / 3.0 - s * s * (t - s);
        assert_relative_eq!(o.value, exact, max_relative = 1e-6);
    }
}

#[test]
fn sup_tail_sits_between_one_and_two_reflections() {
    for a in [0.5, 1.0, 2.0, 3.0, 4.0] {
        let one_sided = 2.0 * (1.0 - normal_cdf(a));
        let p = brownian_sup_tail(a);
        assert!(p >= one_sided && p <= 2.0 * one_sided, "a = {a}: {p}");
    }
    assert_relative_eq!(brownian_sup_tail(6.0) / (4.0 * (1.0 - normal_cdf(6.0))), 1.0, max_relative = 1e-6);
}

#[test]
fn sup_moments_scale_diffusively() {
    for m in [1.0, 2.0, 5.0] {
        assert_relative_eq!(
            brownian_sup_moment(m, 0.25),
            0.25f64.powf(m / 2.0) * brownian_sup_moment(m, 1.0),
            max_relative = 1e-9
        );
    }
    assert_relative_eq!(brownian_sup_moment(1.0, 1.0), (std::f64::consts::PI / 2.0).sqrt(), max_relative = 1e-8);
}

#[test]
fn identity_differences_are_deterministic() {
    let f = make_drift("identity", &DriftParams::default()).unwrap();
    let ens = Ensemble {
        paths: 8,
        level: 8,
        horizon: 1.0,
        master_seed: 3,
    };
    let r = mc_difference_moment(&f, 0.0, &[0.5, 0.25], &[2.0], &[(0.0, 0.5), (0.25, 1.0)], &ens, Backend::Sequential)
        .unwrap();
    for c in &r.cells {
        let a = c.separation.unwrap();
        assert_relative_eq!(c.moment, ((c.t - c.s) * a).powi(2), max_relative = 1e-12);
        assert!(c.moment_se < 1e-14);
    }
}

#[test]
fn constant_field_occupation_is_exact() {
    let f = make_drift("constant", &DriftParams { value: Some(2.0), ..Default::default() }).unwrap();
    let ens = Ensemble {
        paths: 4,
        level: 6,
        horizon: 1.0,
        master_seed: 9,
    };
    let r = mc_krylov_moment(&f, &[1.0, 3.0], &[(0.0, 0.5), (0.5, 1.0)], &ens, Backend::Sequential).unwrap();
    for c in &r.cells {
        assert_relative_eq!(c.root, 2.0 * (c.t - c.s), max_relative = 1e-12);
    }
}
