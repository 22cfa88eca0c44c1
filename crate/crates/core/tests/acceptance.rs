//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything; extra arguments
//! select criteria by substring (`cargo test --test acceptance -- flow`).
//! A FAIL line does not abort the run; the summary line counts them.

use std::time::Instant;

use regnoise::fields::{make_drift, mollify, DriftField, DriftParams};
use regnoise::flow::{
    build_flow, check_flow_property, glue_flows, holder_in_x, Bands, CertificateThresholds, FlowSpec, FlowTable,
    Lattice,
};
use regnoise::paths::{generate_path, BrownianPath};
use regnoise::sewing::{sewing_selftest, ControlFunction, Scheme, SelftestConfig};
use regnoise::verify::{
    certify_path, jn_amplification, mc_difference_moment, mc_gradient_moment, mc_krylov_moment, mollified_sequence,
    regularization_demo, stability_experiment, CertificateSetup, Ensemble, JnProcess, MomentReport, StabilityGrid,
    Summability,
};
use regnoise::{Backend, Result};

const BACKEND: Backend = Backend::Parallel;

// Moment criteria.
const MOMENT_PATHS: usize = 10_000;
const MOMENT_LEVEL: u32 = 14;
const MOMENT_HORIZON: f64 = 0.125;
const BUMP_WIDTH: f64 = 1.0 / 256.0;
const GRADIENT_EXPONENT: f64 = 0.125;
const GRADIENT_TOL: f64 = 0.10;
const KRYLOV_EXPONENT: f64 = 0.25;
const KRYLOV_TOL: f64 = 0.05;
const Z_MAX: f64 = 3.0;
const SPACE_LEVEL: u32 = 10;
const SPACE_TARGET: f64 = 1.0;
const SPACE_TOL: f64 = 0.1;

// John-Nirenberg.
const JN_PATHS: usize = 10_000;
const JN_LEVEL: u32 = 12;
const JN_GROWTH_MAX: f64 = 0.25;

// Sewing.
const SEW_RELATIVE: f64 = 1e-6;

// Flows.
const SIGN_SIGMA: f64 = 1.0 / 64.0;
const FLOW_SEEDS: u64 = 32;
const FLOW_SEEDS_REQUIRED: usize = 30;
const REFINEMENT_LEVELS: [u32; 5] = [10, 11, 12, 13, 14];
/// Mollification width of the refinement study; at `SIGN_SIGMA` the largest
/// defect is still pre-asymptotic on these levels.
const REFINEMENT_SIGMA: f64 = 0.125;
const REFINEMENT_RADIUS: f64 = 0.5;
/// Out-of-sample slack on the constant fitted for the linear drift.
const LINEAR_SLACK: f64 = 2.0;
const HOLDER_RADIUS: f64 = 1.0 / 256.0;
const HOLDER_SEEDS: u64 = 8;
const KAPPA_MIN: f64 = 0.9;

// Uniqueness certificate, thresholds calibrated on seeds 1001..=1016.
const CERT_LEVEL: u32 = 12;
const CERT_DEFECT_RATIO: f64 = 1.0;
const CERT_CONSTANCY: f64 = 0.02;
const CERT_JUMP: (f64, f64) = (0.5, 0.25);

// Stability.
const STABILITY_SEEDS: u64 = 8;
const STABILITY_SLOPE_MIN: f64 = 0.4;

// Gluing.
const GLUE_SEEDS: u64 = 8;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn bump(width: f64) -> Result<DriftField> {
    make_drift(
        "gaussian_bump",
        &DriftParams {
            width: Some(width),
            ..Default::default()
        },
    )
}

fn mollified_sign(sigma: f64) -> Result<DriftField> {
    mollify(&make_drift("sign", &DriftParams::default())?, sigma)
}

fn moment_intervals() -> Vec<(f64, f64)> {
    (3..=10).rev().map(|k| (0.0, 2f64.powi(-k))).collect()
}

fn moment_ensemble(level: u32) -> Ensemble {
    Ensemble {
        paths: MOMENT_PATHS,
        level,
        horizon: MOMENT_HORIZON,
        master_seed: 1,
    }
}

fn worst_z(report: &MomentReport) -> f64 {
    report
        .cells
        .iter()
        .filter_map(|c| c.z_score)
        .map(f64::abs)
        .fold(0.0, f64::max)
}

fn oracle_cells(report: &MomentReport) -> usize {
    report.cells.iter().filter(|c| c.z_score.is_some()).count()
}

fn slope_verdict(report: &MomentReport, m: f64, target: f64, tol: f64) -> Result<Verdict> {
    let fit = report.slope(m).expect("slope for the requested m");
    let z = worst_z(report);
    let n = oracle_cells(report);
    verdict(
        (fit.normalized_slope - target).abs() <= tol && n == report.intervals.len() && z <= Z_MAX,
        format!(
            "m = {m}: slope {:.4} +- {:.4} (target {target} +- {tol}), oracle cells {n}, max |z| {z:.2}",
            fit.normalized_slope, fit.normalized_slope_se
        ),
    )
}

fn davie_gradient() -> Result<Verdict> {
    let r = mc_gradient_moment(
        &bump(BUMP_WIDTH)?,
        &[2.0],
        &moment_intervals(),
        &moment_ensemble(MOMENT_LEVEL),
        BACKEND,
    )?;
    slope_verdict(&r, 2.0, GRADIENT_EXPONENT, GRADIENT_TOL)
}

fn krylov() -> Result<Verdict> {
    let r = mc_krylov_moment(
        &bump(BUMP_WIDTH)?,
        &[1.0],
        &moment_intervals(),
        &moment_ensemble(MOMENT_LEVEL),
        BACKEND,
    )?;
    slope_verdict(&r, 1.0, KRYLOV_EXPONENT, KRYLOV_TOL)
}

fn spatial_lipschitz() -> Result<Verdict> {
    let separations: Vec<f64> = (1..=6).rev().map(|k| 2f64.powi(-k)).collect();
    let r = mc_difference_moment(
        &bump(1.0)?,
        1.0,
        &separations,
        &[2.0],
        &moment_intervals(),
        &moment_ensemble(SPACE_LEVEL),
        BACKEND,
    )?;
    let worst = r
        .space
        .iter()
        .map(|s| (s.slope - SPACE_TARGET).abs())
        .fold(0.0, f64::max);
    let first = &r.space[0];
    verdict(
        worst <= SPACE_TOL,
        format!(
            "{} intervals, largest |slope - {SPACE_TARGET}| = {worst:.4} (tol {SPACE_TOL}); [{}, {}]: {:.4} +- {:.4}",
            r.space.len(),
            first.s,
            first.t,
            first.slope,
            first.slope_se
        ),
    )
}

fn john_nirenberg() -> Result<Verdict> {
    let m: Vec<f64> = (2..=10).map(f64::from).collect();
    let ensemble = Ensemble {
        paths: JN_PATHS,
        level: JN_LEVEL,
        horizon: 1.0,
        master_seed: 1,
    };
    let r = jn_amplification(
        &JnProcess::Brownian { scale: 1.0 },
        0.5,
        &ControlFunction::length(),
        0.0,
        1.0,
        &m,
        &ensemble,
        BACKEND,
    )?;
    let z = r.z_scores.iter().flatten().map(|z| z.abs()).fold(0.0, f64::max);
    let with_oracle = r.z_scores.iter().flatten().count();
    verdict(
        r.growth_exponent <= JN_GROWTH_MAX && with_oracle == m.len() && z <= Z_MAX,
        format!(
            "c = {:.4}, ratio growth {:.4} (max {JN_GROWTH_MAX}), max |z| {z:.2} over {with_oracle} moments",
            r.fitted_c, r.growth_exponent
        ),
    )
}

fn sewing() -> Result<Verdict> {
    let cfg = SelftestConfig::default();
    let r = sewing_selftest(&cfg)?;
    verdict(
        r.violations == 0 && r.young_max_relative <= SEW_RELATIVE,
        format!(
            "{} instances, {} violations over {} intervals, worst error/certificate {:.3}, Young relative error {:.2e}",
            cfg.instances, r.violations, r.intervals_checked, r.worst_ratio, r.young_max_relative
        ),
    )
}

fn full_spec(level: u32, time_level: u32, start_level: u32, lattice: Lattice) -> FlowSpec {
    FlowSpec {
        level,
        time_level,
        start_level,
        lattice,
        bands: Bands::Full,
        scheme: Scheme::NonlinearYoung,
    }
}

/// Nested lattices, step `2^-5` at level 10 and halved per level.
fn refinement_lattice(level: u32) -> Result<Lattice> {
    Lattice::symmetric(REFINEMENT_RADIUS, level - 5)
}

/// Closed-form flow of `b(x) = -x`: `exp(-(t-s)) x + int_s^t exp(-(t-r)) dW_r`, with the
/// integral taken by parts and `int_0^t exp(r) W_r dr` tabulated by the trapezoid rule.
struct LinearFlow<'a> {
    path: &'a BrownianPath,
    cumulative: Vec<f64>,
}

impl<'a> LinearFlow<'a> {
    fn new(path: &'a BrownianPath) -> Self {
        let g = path.grid();
        let h = g.step();
        let mut cumulative = vec![0.0; g.len()];
        for k in 1..g.len() {
            let f = |j: usize| g.time(j).exp() * path.scalar(j);
            cumulative[k] = cumulative[k - 1] + 0.5 * h * (f(k - 1) + f(k));
        }
        Self { path, cumulative }
    }

    fn value(&self, s: f64, x: f64, t: f64) -> f64 {
        let g = self.path.grid();
        let (i, j) = (g.index_of(s).unwrap(), g.index_of(t).unwrap());
        let ws = self.path.scalar(i);
        let integral = (-t).exp() * (self.cumulative[j] - self.cumulative[i]) - ws * (1.0 - (-(t - s)).exp());
        (-(t - s)).exp() * x + (self.path.scalar(j) - ws) - integral
    }
}

fn flow_property() -> Result<Verdict> {
    // zero drift
    let mut zero_max = 0.0f64;
    for seed in 1..=4 {
        let path = generate_path(seed, 1.0, 12, 1)?;
        let flow = build_flow(
            &DriftField::zero(1),
            &path,
            &full_spec(12, 6, 3, Lattice::symmetric(1.0, 4)?),
            BACKEND,
        )?;
        zero_max = zero_max.max(check_flow_property(&flow, None).max_defect);
    }

    // linear drift against the closed form; constant fitted on the three coarsest levels
    let linear = make_drift("linear", &DriftParams::default())?;
    let mut linear_ok = true;
    let mut linear_c = 0.0f64;
    for seed in 1..=4 {
        let path = generate_path(seed, 1.0, 16, 1)?;
        let exact = LinearFlow::new(&path);
        let mut rows = Vec::new();
        for &level in &REFINEMENT_LEVELS {
            let flow = build_flow(&linear, &path, &full_spec(level, 6, 3, refinement_lattice(level)?), BACKEND)?;
            let mut err = 0.0f64;
            for a in 0..flow.starts() {
                let s = flow.time(flow.start_index(a));
                for i in 0..flow.lattice.count {
                    for b in flow.start_index(a)..flow.time_points() {
                        let x = exact.value(s, flow.lattice.point(i), flow.time(b));
                        err = err.max((flow.value(a, i, b).unwrap() - x).abs());
                    }
                }
            }
            let scale = flow.step() + flow.lattice.step.powi(2);
            rows.push((err, check_flow_property(&flow, None).max_defect, scale));
        }
        let c = rows[..3].iter().map(|(e, _, s)| e / s).fold(0.0, f64::max);
        linear_c = linear_c.max(c);
        linear_ok &= rows
            .iter()
            .all(|&(e, d, s)| e <= LINEAR_SLACK * c * s && d <= LINEAR_SLACK * c * s);
    }

    // mollified sign drift: defect over levels with the lattice refined alongside
    let b = mollified_sign(REFINEMENT_SIGMA)?;
    let mut decreasing = 0usize;
    let mut example = Vec::new();
    for seed in 1..=FLOW_SEEDS {
        let path = generate_path(seed, 1.0, REFINEMENT_LEVELS[4], 1)?;
        let defects = REFINEMENT_LEVELS
            .iter()
            .map(|&level| {
                let flow = build_flow(&b, &path, &full_spec(level, 6, 3, refinement_lattice(level)?), BACKEND)?;
                Ok(check_flow_property(&flow, None).max_defect)
            })
            .collect::<Result<Vec<f64>>>()?;
        if defects.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
        if seed == 1 {
            example = defects;
        }
    }
    let example: Vec<String> = example.iter().map(|d| format!("{d:.2e}")).collect();
    verdict(
        zero_max == 0.0 && linear_ok && decreasing >= FLOW_SEEDS_REQUIRED,
        format!(
            "zero drift defect {zero_max:e}; linear drift within {LINEAR_SLACK} C (h + dx^2), C = {linear_c:.3}: {linear_ok}; \
             mollified sign decreasing on {decreasing}/{FLOW_SEEDS} seeds (need {FLOW_SEEDS_REQUIRED}), seed 1: [{}]",
            example.join(", ")
        ),
    )
}

fn holder_spec() -> Result<FlowSpec> {
    Ok(full_spec(12, 6, 3, Lattice::symmetric(HOLDER_RADIUS, 8)?))
}

fn holder() -> Result<Verdict> {
    let path = generate_path(1, 1.0, 12, 1)?;
    let zero = holder_in_x(&build_flow(&DriftField::zero(1), &path, &holder_spec()?, BACKEND)?, HOLDER_RADIUS)?;
    let b = mollified_sign(SIGN_SIGMA)?;
    let mut kappas = Vec::new();
    for seed in 1..=HOLDER_SEEDS {
        let path = generate_path(seed, 1.0, 12, 1)?;
        kappas.push(holder_in_x(&build_flow(&b, &path, &holder_spec()?, BACKEND)?, HOLDER_RADIUS)?.kappa);
    }
    let min = kappas.iter().copied().fold(f64::INFINITY, f64::min);
    verdict(
        zero.kappa == 1.0 && min >= KAPPA_MIN,
        format!(
            "zero drift kappa = {:?}; mollified sign on [-{HOLDER_RADIUS}, {HOLDER_RADIUS}], {HOLDER_SEEDS} seeds: min kappa {min:.4} (need {KAPPA_MIN})",
            zero.kappa
        ),
    )
}

fn certificate_setup() -> CertificateSetup {
    CertificateSetup {
        x0: 0.0,
        level: CERT_LEVEL,
        start_level: 8,
        lattice_step: 1.0 / 256.0,
        margin: 1,
        kappa: 0.9,
        beta: 1.25,
        control: ControlFunction::length(),
        thresholds: CertificateThresholds {
            defect_ratio: CERT_DEFECT_RATIO,
            constancy: CERT_CONSTANCY,
        },
    }
}

fn uniqueness() -> Result<Verdict> {
    let b = mollified_sign(SIGN_SIGMA)?;
    let setup = certificate_setup();
    let (mut clean, mut caught) = (0usize, 0usize);
    let (mut worst_clean, mut mildest_corrupt) = (0.0f64, f64::INFINITY);
    let mut betas = Vec::new();
    for seed in 1..=FLOW_SEEDS {
        let path = generate_path(seed, 1.0, CERT_LEVEL, 1)?;
        let ok = certify_path(&b, &path, &setup, None, BACKEND)?;
        clean += ok.pass as usize;
        worst_clean = worst_clean.max(ok.max_constancy);
        betas.extend(ok.best_beta);
        let bad = certify_path(&b, &path, &setup, Some(CERT_JUMP), BACKEND)?;
        caught += !bad.pass as usize;
        mildest_corrupt = mildest_corrupt.min(bad.max_constancy);
    }
    verdict(
        clean >= FLOW_SEEDS_REQUIRED && caught == FLOW_SEEDS as usize,
        format!(
            "level {CERT_LEVEL}: clean pass {clean}/{FLOW_SEEDS} (need {FLOW_SEEDS_REQUIRED}), corrupted fail {caught}/{FLOW_SEEDS}; \
             constancy clean max {worst_clean:.2e}, corrupted min {mildest_corrupt:.2e} (threshold {CERT_CONSTANCY}); \
             smallest empirical beta {:.3}",
            betas.iter().copied().fold(f64::INFINITY, f64::min)
        ),
    )
}

fn stability() -> Result<Verdict> {
    let b = make_drift("sign", &DriftParams::default())?;
    let sigmas: Vec<f64> = (3..=9).map(|n| 2f64.powi(-n)).collect();
    let grid = StabilityGrid {
        level: 12,
        time_level: 4,
        start_level: 2,
        lattice: Lattice::symmetric(1.0, 4)?,
        norm_radius: 4.0,
        norm_options: regnoise::fields::NormOptions {
            time_cells: 1,
            space_cells: 1 << 14,
        },
    };
    let seeds: Vec<u64> = (1..=STABILITY_SEEDS).collect();
    let r = stability_experiment(
        &b,
        &mollified_sequence(&b, &sigmas)?,
        &sigmas,
        0.0,
        &seeds,
        1.0,
        &grid,
        BACKEND,
    )?;
    let s = &r.summability[0];
    let summable = s.verdict == Summability::SummableExtrapolated;
    verdict(
        r.slope >= STABILITY_SLOPE_MIN && r.monotone && summable,
        format!(
            "slope {:.3} +- {:.3} (min {STABILITY_SLOPE_MIN}), monotone {}, summability {:?} (ratio {:?}, total {:?})",
            r.slope, r.slope_se, r.monotone, s.verdict, s.ratio, s.total
        ),
    )
}

fn glue_spec(level: u32, time_level: u32, start_level: u32) -> Result<FlowSpec> {
    Ok(full_spec(level, time_level, start_level, Lattice::symmetric(1.0, 4)?))
}

fn gluing() -> Result<Verdict> {
    let b = mollified_sign(SIGN_SIGMA)?;
    let mut self_exact = true;
    let mut within = 0usize;
    let mut worst = 0.0f64;
    for seed in 1..=GLUE_SEEDS {
        let path = generate_path(seed, 1.0, 13, 1)?;
        let prefix = path.restrict_prefix(1)?;
        // prefix flows at step 2^-12 and 2^-13, full flows at 2^-12 and 2^-13
        let a_coarse = build_flow(&b, &prefix, &glue_spec(11, 5, 2)?, BACKEND)?;
        let a_fine = build_flow(&b, &prefix, &glue_spec(12, 5, 2)?, BACKEND)?;
        let b_coarse = build_flow(&b, &path, &glue_spec(12, 6, 3)?, BACKEND)?;
        let b_fine = build_flow(&b, &path, &glue_spec(13, 6, 3)?, BACKEND)?;

        let (glued, report) = glue_flows(&b_fine, &b_fine)?;
        self_exact &= report.defect == 0.0 && same_bits(&glued, &b_fine);

        let budget = a_coarse.sup_distance(&a_fine)? + b_coarse.sup_distance(&b_fine)?;
        let (_, cross) = glue_flows(&a_coarse, &b_fine)?;
        if cross.shared_entries > 0 && cross.defect <= budget {
            within += 1;
        }
        worst = worst.max(cross.defect / budget);
    }
    verdict(
        self_exact && within == GLUE_SEEDS as usize,
        format!(
            "self-glue bit-exact: {self_exact}; cross-level defect within budget on {within}/{GLUE_SEEDS} seeds, \
             largest defect/budget {worst:.3}"
        ),
    )
}

fn same_bits(a: &FlowTable, b: &FlowTable) -> bool {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_binary(&mut x).is_ok() && b.write_binary(&mut y).is_ok() && x == y
}

fn regularization() -> Result<Verdict> {
    let seeds: Vec<u64> = (1..=32).collect();
    let r = regularization_demo(&seeds, &REFINEMENT_LEVELS, 1.0, None, BACKEND)?;
    let med: Vec<String> = r.median_discrepancy.iter().map(|d| format!("{d:.2e}")).collect();
    verdict(
        r.pass,
        format!(
            "residuals {:.1e} and {:.1e} for y = 0 and y = t^2 (tol {:.0e}); median discrepancy over levels 10..14: [{}]",
            r.deterministic.residual_zero,
            r.deterministic.residual_square,
            r.deterministic.tolerance,
            med.join(", ")
        ),
    )
}

type Criterion = (&'static str, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 11] = [
    ("davie_exponent", davie_gradient),
    ("krylov_exponent", krylov),
    ("spatial_lipschitz", spatial_lipschitz),
    ("john_nirenberg", john_nirenberg),
    ("sewing_soundness", sewing),
    ("flow_property", flow_property),
    ("holder_in_x", holder),
    ("uniqueness_certificate", uniqueness),
    ("stability_rate", stability),
    ("gluing", gluing),
    ("regularization", regularization),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let (mut ran, mut passed) = (0usize, 0usize);
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        ran += 1;
        passed += v.pass as usize;
        println!(
            "{} {name}: {} [{:.1} s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {passed} of {ran} criteria pass");
}
