use proptest::prelude::*;
use regnoise::fields::{make_drift, DriftField, DriftParams};
use regnoise::flow::{build_flow, check_flow_property, Bands, FlowSpec, Lattice};
use regnoise::paths::{generate_path, refine};
use regnoise::sewing::{sew, Coherence, ControlFunction, Germ, Scheme};
use regnoise::stats::fit_line;
use regnoise::verify::{summable_check, Summability};
use regnoise::Backend;

fn spec(level: u32, lattice_level: u32) -> FlowSpec {
    FlowSpec {
        level,
        time_level: 5,
        start_level: 2,
        lattice: Lattice::symmetric(1.0, lattice_level).unwrap(),
        bands: Bands::Full,
        scheme: Scheme::NonlinearYoung,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn refinement_keeps_coarse_samples(seed in any::<u64>(), level in 0u32..9) {
        let p = generate_path(seed, 1.0, level, 1).unwrap();
        let fine = refine(&p).unwrap();
        let back = fine.coarsen().unwrap();
        prop_assert_eq!(back.values(), p.values());
        prop_assert_eq!(fine.level(), level + 1);
    }

    #[test]
    fn zero_drift_flow_is_translation(seed in any::<u64>(), lattice_level in 2u32..6) {
        let path = generate_path(seed, 1.0, 8, 1).unwrap();
        let flow = build_flow(&DriftField::zero(1), &path, &spec(8, lattice_level), Backend::Sequential).unwrap();
        for a in 0..flow.starts() {
            for i in 0..flow.lattice.count {
                prop_assert!(flow.row(a, i).unwrap().iter().all(|d| *d == 0.0));
            }
        }
        prop_assert_eq!(check_flow_property(&flow, None).max_defect, 0.0);
    }

    #[test]
    fn backends_agree_bitwise(seed in any::<u64>()) {
        let b = make_drift("sign", &DriftParams { sigma: Some(0.125), ..Default::default() }).unwrap();
        let path = generate_path(seed, 1.0, 9, 1).unwrap();
        let s = build_flow(&b, &path, &spec(9, 4), Backend::Sequential).unwrap();
        let p = build_flow(&b, &path, &spec(9, 4), Backend::Parallel).unwrap();
        prop_assert_eq!(s, p);
    }

    #[test]
    fn exact_lines_are_recovered(slope in -5.0f64..5.0, intercept in -5.0f64..5.0) {
        let xs: Vec<f64> = (0..8).map(f64::from).collect();
        let ys: Vec<f64> = xs.iter().map(|x| intercept + slope * x).collect();
        let fit = fit_line(&xs, &ys, &[]).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-10);
        prop_assert!((fit.intercept - intercept).abs() < 1e-10);
    }

    #[test]
    fn weighted_slope_error_ignores_weight_scale(scale in 1e-3f64..1e3) {
        let xs: Vec<f64> = (0..6).map(f64::from).collect();
        let ys = [0.1, 1.3, 1.9, 3.2, 3.9, 5.1];
        let w = [1.0, 2.0, 1.0, 3.0, 1.0, 2.0];
        let ws: Vec<f64> = w.iter().map(|v| v * scale).collect();
        let a = fit_line(&xs, &ys, &w).unwrap();
        let b = fit_line(&xs, &ys, &ws).unwrap();
        prop_assert!((a.slope_se - b.slope_se).abs() <= 1e-9 * a.slope_se);
    }

    #[test]
    fn geometric_sequences_are_summable(rho in 0.2f64..0.9, c in 0.1f64..10.0) {
        let seq: Vec<f64> = (1..=8).map(|n| c * rho.powi(n)).collect();
        let v = &summable_check(&seq, &[1.0]).unwrap()[0];
        prop_assert_eq!(v.verdict, Summability::SummableExtrapolated);
        let exact = c * rho / (1.0 - rho);
        prop_assert!((v.total.unwrap() - exact).abs() <= 1e-8 * exact);
    }

    #[test]
    fn power_laws_are_not_called_summable(exponent in 0.1f64..3.0) {
        let seq: Vec<f64> = (1..=8).map(|n| f64::from(n).powf(-exponent)).collect();
        let v = &summable_check(&seq, &[1.0]).unwrap()[0];
        prop_assert_eq!(v.verdict, Summability::Inconclusive);
    }

    #[test]
    fn additive_germs_sew_to_their_increments(k in 0.5f64..6.0, phase in 0.0f64..3.0) {
        let g = move |t: f64| (k * t + phase).sin();
        let germ = Germ::new(
            1,
            Coherence { constant: 0.0, theta: 2.0 },
            ControlFunction::length(),
            move |s, t| vec![g(t) - g(s)],
        );
        let r = sew(&germ, 0.0, 1.0, 8, 2).unwrap();
        prop_assert!((r.total()[0] - (g(1.0) - g(0.0))).abs() < 1e-12);
    }
}
