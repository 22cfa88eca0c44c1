//! Experiment configuration: a TOML file, dotted `--set` overrides, strict keys.

use std::path::{Path, PathBuf};

use regnoise::fields::{make_drift, DriftField, DriftParams, NormOptions};
use regnoise::flow::{CertificateThresholds, DefectThreshold};
use regnoise::sewing::{ControlFunction, Scheme, SelftestConfig};
use regnoise::verify::{CertificateSetup, JnProcess};
use regnoise::Backend;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

fn pow2(ks: impl Iterator<Item = i32>) -> Vec<f64> {
    ks.map(|k| 2f64.powi(k)).collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunConfig,
    pub drift: DriftConfig,
    pub simulate: SimulateConfig,
    pub average: AverageConfig,
    pub flow: FlowConfig,
    pub davie: DavieConfig,
    pub jn: JnConfig,
    pub stability: StabilityConfig,
    pub demo: DemoConfig,
    pub sew: SelftestConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; path seeds derive from it.
    pub seed: u64,
    pub out: PathBuf,
    pub horizon: f64,
    pub level: u32,
    pub backend: Backend,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: PathBuf::from("out"),
            horizon: 1.0,
            level: 12,
            backend: Backend::Parallel,
        }
    }
}

/// Catalog name plus parameter object. A `[drift]` table replaces the default
/// drift as a whole.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub kind: String,
    #[serde(default)]
    pub params: DriftParams,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            kind: "gaussian_bump".into(),
            params: DriftParams {
                width: Some(2f64.powi(-8)),
                ..Default::default()
            },
        }
    }
}

impl DriftConfig {
    pub fn build(&self) -> Result<DriftField, CliError> {
        Ok(make_drift(&self.kind, &self.params)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub x0: Vec<f64>,
    pub schemes: Vec<Scheme>,
    /// Escape radius of the drift part.
    pub radius: Option<f64>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            x0: vec![0.0],
            schemes: vec![Scheme::NonlinearYoung, Scheme::EulerMaruyama],
            radius: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AverageConfig {
    pub radius: f64,
    pub time_level: u32,
    /// `2^space_level + 1` spatial points on `[-radius, radius]`.
    pub space_level: u32,
    pub alpha: f64,
    pub epsilon: f64,
}

impl Default for AverageConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            time_level: 8,
            space_level: 8,
            alpha: 0.1,
            epsilon: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub scheme: Scheme,
    pub time_level: u32,
    pub start_level: u32,
    pub lattice_radius: f64,
    pub lattice_level: u32,
    pub threshold: Option<DefectThreshold>,
    pub holder_radius: f64,
    pub kappa_min: f64,
    /// Glue the flow on `[0, T/2]` into the flow on `[0, T]`.
    pub glue: bool,
    pub certify: Option<CertifyConfig>,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::NonlinearYoung,
            time_level: 6,
            start_level: 3,
            lattice_radius: 2f64.powi(-8),
            lattice_level: 8,
            threshold: None,
            holder_radius: 2f64.powi(-8),
            kappa_min: 0.9,
            glue: true,
            certify: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertifyConfig {
    pub x0: f64,
    pub start_level: u32,
    pub lattice_step: f64,
    pub margin: usize,
    pub kappa: f64,
    pub beta: f64,
    pub defect_ratio: f64,
    pub constancy: f64,
    /// `[time, size]` of a jump added to the solution; the certificate is then expected to fail.
    pub corruption: Option<[f64; 2]>,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            x0: 0.0,
            start_level: 8,
            lattice_step: 2f64.powi(-8),
            margin: 1,
            kappa: 0.9,
            beta: 1.25,
            defect_ratio: 1.0,
            constancy: 0.02,
            corruption: None,
        }
    }
}

impl CertifyConfig {
    pub fn setup(&self, level: u32) -> CertificateSetup {
        CertificateSetup {
            x0: self.x0,
            level,
            start_level: self.start_level,
            lattice_step: self.lattice_step,
            margin: self.margin,
            kappa: self.kappa,
            beta: self.beta,
            control: ControlFunction::length(),
            thresholds: CertificateThresholds {
                defect_ratio: self.defect_ratio,
                constancy: self.constancy,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimate {
    Gradient,
    Krylov,
    Difference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DavieConfig {
    pub estimates: Vec<Estimate>,
    pub paths: usize,
    pub level: u32,
    pub horizon: f64,
    /// Intervals are `[start, start + length]`.
    pub start: f64,
    pub lengths: Vec<f64>,
    pub gradient_m: Vec<f64>,
    pub krylov_m: Vec<f64>,
    pub difference_m: Vec<f64>,
    /// Drift of the difference moments; the main drift when absent.
    pub difference_drift: Option<DriftConfig>,
    pub difference_level: u32,
    pub center: f64,
    pub separations: Vec<f64>,
    pub gradient_tolerance: f64,
    pub krylov_tolerance: f64,
    pub space_target: f64,
    pub space_tolerance: f64,
    pub z_max: f64,
}

impl Default for DavieConfig {
    fn default() -> Self {
        Self {
            estimates: vec![Estimate::Gradient, Estimate::Krylov, Estimate::Difference],
            paths: 10_000,
            level: 14,
            horizon: 0.125,
            start: 0.0,
            lengths: pow2(-10..=-3),
            gradient_m: vec![2.0],
            krylov_m: vec![1.0],
            difference_m: vec![2.0],
            difference_drift: Some(DriftConfig {
                kind: "gaussian_bump".into(),
                params: DriftParams {
                    width: Some(1.0),
                    ..Default::default()
                },
            }),
            difference_level: 10,
            center: 1.0,
            separations: pow2(-6..=-1),
            gradient_tolerance: 0.1,
            krylov_tolerance: 0.05,
            space_target: 1.0,
            space_tolerance: 0.1,
            z_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JnConfig {
    pub process: JnProcess,
    pub alpha: f64,
    pub s: f64,
    pub t: f64,
    pub m: Vec<f64>,
    pub paths: usize,
    pub level: u32,
    /// Largest admissible log-log slope of the ratio to the Gamma growth.
    pub growth_max: f64,
    pub z_max: f64,
}

impl Default for JnConfig {
    fn default() -> Self {
        Self {
            process: JnProcess::Brownian { scale: 1.0 },
            alpha: 0.5,
            s: 0.0,
            t: 1.0,
            m: (2..=10).map(f64::from).collect(),
            paths: 10_000,
            level: 12,
            growth_max: 0.25,
            z_max: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub sigmas: Vec<f64>,
    pub nu: f64,
    pub seeds: usize,
    pub time_level: u32,
    pub start_level: u32,
    pub lattice_radius: f64,
    pub lattice_level: u32,
    pub norm_radius: f64,
    pub norm_options: NormOptions,
    pub slope_min: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            sigmas: pow2(-9..=-3).into_iter().rev().collect(),
            nu: 0.0,
            seeds: 8,
            time_level: 4,
            start_level: 2,
            lattice_radius: 1.0,
            lattice_level: 4,
            norm_radius: 4.0,
            norm_options: NormOptions {
                time_cells: 1,
                space_cells: 1 << 14,
            },
            slope_min: 0.4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub seeds: usize,
    pub levels: Vec<u32>,
    pub certify: Option<CertifyConfig>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            seeds: 16,
            levels: (10..=14).collect(),
            certify: None,
        }
    }
}

/// Parse a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Read the file (if any), apply overrides in order, and deserialize strictly.
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    Config::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

impl Config {
    /// SHA-256 of the canonical JSON form of the effective configuration,
    /// leaving out the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.out = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}
