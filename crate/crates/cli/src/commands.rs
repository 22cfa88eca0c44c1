//! One function per subcommand; each returns its artifacts and checks.

use regnoise::averaging::{build_averaged_table, estimate_holder, uniform_points};
use regnoise::flow::{build_flow, check_flow_property, glue_flows, holder_in_x, solve_em, Bands, FlowSpec, Lattice};
use regnoise::paths::generate_path;
use regnoise::rng::ensemble_seed;
use regnoise::sewing::{sewing_selftest, solve_nonlinear_young, ControlFunction, Scheme};
use regnoise::verify::{
    certify_path, jn_amplification, mc_difference_moment, mc_gradient_moment, mc_krylov_moment, mollified_sequence,
    regularization_demo, stability_experiment, Ensemble, MomentReport, StabilityGrid, Summability,
};
use serde::Serialize;

use crate::config::{Config, Estimate};
use crate::manifest::{Artifact, Check};
use crate::CliError;

pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<Check>,
}

pub fn dispatch(name: &str, config: &Config) -> Result<Outcome, CliError> {
    match name {
        "simulate" => simulate(config),
        "average" => average(config),
        "flow" => flow(config),
        "davie" => davie(config),
        "jn" => jn(config),
        "stability" => stability(config),
        "demo-regularization" => demo(config),
        "sew-selftest" => sew(config),
        other => Err(CliError::Usage(format!("unknown subcommand `{other}`"))),
    }
}

fn seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| ensemble_seed(master, i)).collect()
}

#[derive(Serialize)]
struct SimulateSummary {
    path: String,
    level: u32,
    schemes: Vec<Scheme>,
    escape_times: Vec<Option<f64>>,
    cross_scheme_sup_distance: Option<f64>,
}

fn simulate(c: &Config) -> Result<Outcome, CliError> {
    let b = c.drift.build()?;
    let s = &c.simulate;
    if s.x0.len() != b.dim {
        return Err(CliError::Usage(format!(
            "simulate.x0 has {} components, drift has dimension {}",
            s.x0.len(),
            b.dim
        )));
    }
    let path = generate_path(c.run.seed, c.run.horizon, c.run.level, b.dim)?;
    let mut artifacts = vec![
        Artifact::with("path.bin", "path_binary", |w| path.write_binary(w))?,
        Artifact::with("path.csv", "path_csv", |w| path.write_csv(w))?,
    ];
    let mut solutions = Vec::new();
    for &scheme in &s.schemes {
        let y = match scheme {
            Scheme::NonlinearYoung => solve_nonlinear_young(&b, &path, &s.x0, c.run.level, s.radius)?,
            Scheme::EulerMaruyama => solve_em(&b, &path, 0, &s.x0, c.run.level)?,
        };
        artifacts.push(Artifact::with(format!("solution_{}.csv", scheme.tag()), "solution_csv", |w| y.write_csv(w))?);
        solutions.push(y);
    }
    let cross = match solutions.as_slice() {
        [a, b, ..] => Some(a.sup_distance(b)?),
        _ => None,
    };
    let summary = SimulateSummary {
        path: path.id(),
        level: c.run.level,
        schemes: s.schemes.clone(),
        escape_times: solutions.iter().map(|y| y.escape_time).collect(),
        cross_scheme_sup_distance: cross,
    };
    artifacts.push(Artifact::json("simulate.json", "simulate_summary", &summary)?);
    Ok(Outcome {
        artifacts,
        checks: Vec::new(),
    })
}

fn average(c: &Config) -> Result<Outcome, CliError> {
    let b = c.drift.build()?;
    if b.dim != 1 {
        return Err(CliError::Usage("average tabulates on a one-dimensional grid; set drift.params.dim = 1".into()));
    }
    let a = &c.average;
    let path = generate_path(c.run.seed, c.run.horizon, c.run.level, 1)?;
    let xs = uniform_points(a.radius, a.space_level);
    let table = build_averaged_table(&b, &path, a.radius, a.time_level, &xs, c.run.backend)?;
    let report = estimate_holder(&table, a.alpha, a.epsilon)?;
    let checks = vec![Check::new(
        "holder",
        report.pass,
        format!(
            "alpha_hat = {:?}, gamma_hat = {:?}, Xi = {:.4e}",
            report.alpha_hat, report.gamma_hat, report.xi
        ),
    )];
    Ok(Outcome {
        artifacts: vec![
            Artifact::with("averaged_table.csv", "averaged_table_csv", |w| table.write_csv(w))?,
            Artifact::json("holder.json", "holder_report", &report)?,
        ],
        checks,
    })
}

fn flow(c: &Config) -> Result<Outcome, CliError> {
    let b = c.drift.build()?;
    let f = &c.flow;
    let path = generate_path(c.run.seed, c.run.horizon, c.run.level, 1)?;
    let lattice = Lattice::symmetric(f.lattice_radius, f.lattice_level)?;
    let spec = FlowSpec {
        level: c.run.level,
        time_level: f.time_level,
        start_level: f.start_level,
        lattice,
        bands: Bands::Full,
        scheme: f.scheme,
    };
    let table = build_flow(&b, &path, &spec, c.run.backend)?;
    let property = check_flow_property(&table, f.threshold);
    let mut checks = Vec::new();
    if f.threshold.is_some() {
        checks.push(Check::new(
            "flow_property",
            property.pass,
            format!("max defect {:.3e} against {:?}", property.max_defect, property.threshold),
        ));
    }
    let mut artifacts = vec![
        Artifact::with("flow.csv", "flow_csv", |w| table.write_csv(w))?,
        Artifact::with("flow.bin", "flow_binary", |w| table.write_binary(w))?,
        Artifact::json("flow_property.json", "flow_property_report", &property)?,
    ];
    match holder_in_x(&table, f.holder_radius) {
        Ok(h) => {
            checks.push(Check::new(
                "holder_in_x",
                h.kappa >= f.kappa_min,
                format!("kappa_hat = {:.4} (min {}), C = {:.4}", h.kappa, f.kappa_min, h.constant),
            ));
            artifacts.push(Artifact::json("holder_in_x.json", "holder_in_x_report", &h)?);
        }
        Err(regnoise::Error::Precondition(msg)) => checks.push(Check::new("holder_in_x", false, msg)),
        Err(e) => return Err(e.into()),
    }
    if f.glue {
        if f.time_level == 0 || f.start_level == 0 || c.run.level == 0 {
            return Err(CliError::Usage("gluing halves the horizon; levels must be >= 1".into()));
        }
        let short = path.restrict_prefix(1)?;
        let short_spec = FlowSpec {
            level: c.run.level - 1,
            time_level: f.time_level - 1,
            start_level: f.start_level - 1,
            ..spec.clone()
        };
        let first = build_flow(&b, &short, &short_spec, c.run.backend)?;
        let (_, report) = glue_flows(&first, &table)?;
        checks.push(Check::new(
            "glue",
            report.defect == 0.0,
            format!("defect {:e} over {} shared entries", report.defect, report.shared_entries),
        ));
        artifacts.push(Artifact::json("glue.json", "glue_report", &report)?);
    }
    if let Some(cert) = &f.certify {
        let setup = cert.setup(c.run.level);
        let corruption = cert.corruption.map(|[t, s]| (t, s));
        let report = certify_path(&b, &path, &setup, corruption, c.run.backend)?;
        let expected = corruption.is_none();
        checks.push(Check::new(
            if expected { "uniqueness_certificate" } else { "uniqueness_negative_control" },
            report.pass == expected,
            format!(
                "defect ratio {:.3e}, constancy {:.3e}, certificate {}",
                report.max_defect_ratio,
                report.max_constancy,
                if report.pass { "passes" } else { "fails" }
            ),
        ));
        artifacts.push(Artifact::json("certificate.json", "uniqueness_report", &report)?);
    }
    Ok(Outcome { artifacts, checks })
}

fn z_check(report: &MomentReport, z_max: f64) -> (bool, f64) {
    let worst = report
        .cells
        .iter()
        .filter_map(|c| c.z_score)
        .map(f64::abs)
        .fold(0.0, f64::max);
    (worst <= z_max, worst)
}

fn slope_check(name: &str, report: &MomentReport, tolerance: f64, z_max: f64, checks: &mut Vec<Check>) {
    if let Some(s) = report.slopes.first() {
        let target = report.theoretical_exponent;
        checks.push(Check::new(
            format!("{name}_slope"),
            (s.normalized_slope - target).abs() <= tolerance,
            format!(
                "m = {}: slope {:.4} +- {:.4} (target {target} +- {tolerance})",
                s.m, s.normalized_slope, s.normalized_slope_se
            ),
        ));
    }
    if report.cells.iter().any(|c| c.z_score.is_some()) {
        let (ok, worst) = z_check(report, z_max);
        checks.push(Check::new(
            format!("{name}_oracle"),
            ok,
            format!("largest |z| = {worst:.2} (max {z_max})"),
        ));
    }
}

fn moment_artifacts(stem: &str, report: &MomentReport, out: &mut Vec<Artifact>) -> Result<(), CliError> {
    out.push(Artifact::json(format!("{stem}.json"), "moment_report", report)?);
    out.push(Artifact::with(format!("{stem}.csv"), "moment_csv", |w| report.write_csv(w))?);
    Ok(())
}

fn davie(c: &Config) -> Result<Outcome, CliError> {
    let d = &c.davie;
    let b = c.drift.build()?;
    let intervals: Vec<(f64, f64)> = d.lengths.iter().map(|l| (d.start, d.start + l)).collect();
    let ensemble = Ensemble {
        paths: d.paths,
        level: d.level,
        horizon: d.horizon,
        master_seed: c.run.seed,
    };
    let backend = c.run.backend;
    let mut artifacts = Vec::new();
    let mut checks = Vec::new();
    for est in &d.estimates {
        match est {
            Estimate::Gradient => {
                let r = mc_gradient_moment(&b, &d.gradient_m, &intervals, &ensemble, backend)?;
                slope_check("gradient", &r, d.gradient_tolerance, d.z_max, &mut checks);
                moment_artifacts("davie_gradient", &r, &mut artifacts)?;
            }
            Estimate::Krylov => {
                let r = mc_krylov_moment(&b, &d.krylov_m, &intervals, &ensemble, backend)?;
                slope_check("krylov", &r, d.krylov_tolerance, d.z_max, &mut checks);
                moment_artifacts("davie_krylov", &r, &mut artifacts)?;
            }
            Estimate::Difference => {
                let f = match &d.difference_drift {
                    Some(dc) => dc.build()?,
                    None => b.clone(),
                };
                let ens = Ensemble {
                    level: d.difference_level,
                    ..ensemble
                };
                let r = mc_difference_moment(&f, d.center, &d.separations, &d.difference_m, &intervals, &ens, backend)?;
                if let Some(s) = r.space.first() {
                    checks.push(Check::new(
                        "difference_space_slope",
                        (s.slope - d.space_target).abs() <= d.space_tolerance,
                        format!(
                            "m = {}: slope {:.4} +- {:.4} (target {} +- {})",
                            s.m, s.slope, s.slope_se, d.space_target, d.space_tolerance
                        ),
                    ));
                }
                moment_artifacts("davie_difference", &r, &mut artifacts)?;
            }
        }
    }
    Ok(Outcome { artifacts, checks })
}

fn jn(c: &Config) -> Result<Outcome, CliError> {
    let j = &c.jn;
    let ensemble = Ensemble {
        paths: j.paths,
        level: j.level,
        horizon: j.t,
        master_seed: c.run.seed,
    };
    let r = jn_amplification(
        &j.process,
        j.alpha,
        &ControlFunction::length(),
        j.s,
        j.t,
        &j.m,
        &ensemble,
        c.run.backend,
    )?;
    let mut checks = vec![Check::new(
        "gamma_ceiling",
        r.growth_exponent <= j.growth_max,
        format!(
            "c = {:.4}, ratio growth exponent {:.4} (max {})",
            r.fitted_c, r.growth_exponent, j.growth_max
        ),
    )];
    let zs: Vec<f64> = r.z_scores.iter().flatten().map(|z| z.abs()).collect();
    if !zs.is_empty() {
        let worst = zs.iter().copied().fold(0.0, f64::max);
        checks.push(Check::new(
            "reflection_oracle",
            worst <= j.z_max,
            format!("largest |z| = {worst:.2} (max {})", j.z_max),
        ));
    }
    if let Some(p) = r.premise {
        checks.push(Check::new(
            "premise",
            p.holds,
            format!("E|V_t - V_s| = {:.4} <= {:.4}", p.mean_abs_increment, p.bound),
        ));
    }
    Ok(Outcome {
        artifacts: vec![Artifact::json("jn.json", "jn_report", &r)?],
        checks,
    })
}

fn stability(c: &Config) -> Result<Outcome, CliError> {
    let st = &c.stability;
    let b = c.drift.build()?;
    let approximants = mollified_sequence(&b, &st.sigmas)?;
    let grid = StabilityGrid {
        level: c.run.level,
        time_level: st.time_level,
        start_level: st.start_level,
        lattice: Lattice::symmetric(st.lattice_radius, st.lattice_level)?,
        norm_radius: st.norm_radius,
        norm_options: st.norm_options,
    };
    let r = stability_experiment(
        &b,
        &approximants,
        &st.sigmas,
        st.nu,
        &seeds(c.run.seed, st.seeds),
        c.run.horizon,
        &grid,
        c.run.backend,
    )?;
    let summable = r
        .summability
        .first()
        .is_some_and(|v| v.verdict == Summability::SummableExtrapolated);
    let checks = vec![
        Check::new(
            "stability_slope",
            r.slope >= st.slope_min,
            format!("slope {:.4} +- {:.4} (min {})", r.slope, r.slope_se, st.slope_min),
        ),
        Check::new("monotone_defects", r.monotone, format!("median defects {:?}", r.median_defects)),
        Check::new(
            "summable_distances",
            summable,
            format!("{:?}", r.summability.first().map(|v| (v.verdict, v.total))),
        ),
    ];
    Ok(Outcome {
        artifacts: vec![Artifact::json("stability.json", "stability_report", &r)?],
        checks,
    })
}

fn demo(c: &Config) -> Result<Outcome, CliError> {
    let d = &c.demo;
    let setup = d.certify.as_ref().map(|cc| {
        let level = d.levels.iter().copied().max().unwrap_or(c.run.level);
        cc.setup(level)
    });
    let r = regularization_demo(&seeds(c.run.seed, d.seeds), &d.levels, c.run.horizon, setup.as_ref(), c.run.backend)?;
    let mut checks = vec![
        Check::new(
            "deterministic_nonuniqueness",
            r.deterministic.pass,
            format!(
                "residuals {:e} and {:e}, separation {}",
                r.deterministic.residual_zero, r.deterministic.residual_square, r.deterministic.separation
            ),
        ),
        Check::new(
            "scheme_discrepancy_decreasing",
            r.decreasing,
            format!("median discrepancies {:?}", r.median_discrepancy),
        ),
    ];
    if let Some(rate) = r.certificate_pass_rate {
        checks.push(Check::new("certificate_rate", true, format!("certificate passes on {:.1}% of seeds", 100.0 * rate)));
    }
    Ok(Outcome {
        artifacts: vec![Artifact::json("regularization.json", "regularization_report", &r)?],
        checks,
    })
}

fn sew(c: &Config) -> Result<Outcome, CliError> {
    let r = sewing_selftest(&c.sew)?;
    let checks = vec![
        Check::new(
            "certificate_soundness",
            r.violations == 0,
            format!(
                "{} violations over {} intervals, worst error/bound {:.3}",
                r.violations, r.intervals_checked, r.worst_ratio
            ),
        ),
        Check::new(
            "young_oracle",
            r.young_max_relative <= c.sew.young_tolerance,
            format!("max relative error {:.3e} (tol {:e})", r.young_max_relative, c.sew.young_tolerance),
        ),
    ];
    Ok(Outcome {
        artifacts: vec![Artifact::json("sew_selftest.json", "sewing_selftest_report", &r)?],
        checks,
    })
}
