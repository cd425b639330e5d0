//! Experiment configuration: a TOML file with one table per concern.

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use nly2d::drift::{DriftSpec, Mollifier, Profile};
use nly2d::sewing::GermRule;
use nly2d::solver::{InitialGuess, PicardOptions};

/// Bad configuration; `key` names the offending entry as `section.field`.
#[derive(Debug)]
pub struct Invalid {
    pub message: String,
    pub key: Option<String>,
}

impl Invalid {
    pub fn new(message: impl Into<String>) -> Self {
        Self { message: message.into(), key: None }
    }

    pub fn at(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self { message: message.into(), key: Some(key.into()) }
    }
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.key {
            Some(k) => write!(f, "{k}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for Invalid {}

pub type CfgResult<T> = std::result::Result<T, Invalid>;

/// Field name quoted in a serde message such as "missing field `hurst`".
fn quoted_field(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(&msg[start..start + len])
}

pub struct Config {
    pub root: toml::Table,
}

impl Config {
    pub fn parse(text: &str) -> CfgResult<Self> {
        let root: toml::Table = text.parse().map_err(|e: toml::de::Error| Invalid::new(e.message().to_string()))?;
        Ok(Self { root })
    }

    pub fn seed(&self) -> CfgResult<Option<u64>> {
        match self.root.get("seed") {
            None => Ok(None),
            Some(toml::Value::Integer(s)) if *s >= 0 => Ok(Some(*s as u64)),
            Some(_) => Err(Invalid::at("seed", "expected a nonnegative integer")),
        }
    }

    /// Rejects top-level keys outside `allowed` (plus `seed`).
    pub fn expect_sections(&self, allowed: &[&str]) -> CfgResult<()> {
        for k in self.root.keys() {
            if k != "seed" && !allowed.contains(&k.as_str()) {
                return Err(Invalid::at(k.clone(), format!("unknown section; this subcommand reads {allowed:?}")));
            }
        }
        Ok(())
    }

    pub fn has(&self, name: &str) -> bool {
        self.root.contains_key(name)
    }

    pub fn section<T: DeserializeOwned>(&self, name: &str) -> CfgResult<T> {
        let v = self.root.get(name).cloned().ok_or_else(|| Invalid::at(name, "missing section"))?;
        T::deserialize(v).map_err(|e| {
            let msg = e.message().to_string();
            let key = quoted_field(&msg).map(|f| format!("{name}.{f}")).unwrap_or_else(|| name.to_string());
            Invalid::at(key, msg)
        })
    }

    /// Like [`Config::section`] but an absent table yields the default.
    pub fn section_or_default<T: DeserializeOwned + Default>(&self, name: &str) -> CfgResult<T> {
        if self.has(name) {
            self.section(name)
        } else {
            Ok(T::default())
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(&self.root).unwrap_or(serde_json::Value::Null)
    }
}

fn unit2() -> [f64; 2] {
    [1.0, 1.0]
}
fn one() -> usize {
    1
}
fn default_bins() -> usize {
    256
}
fn default_margin() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `beta1(t1) + beta2(t2)` with independent fBm paths.
    FbmSum,
    /// Fractional Brownian sheet.
    Sheet,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseCfg {
    pub kind: NoiseKind,
    pub hurst: [f64; 2],
    pub level: u32,
    #[serde(default = "unit2")]
    pub horizon: [f64; 2],
    #[serde(default = "one")]
    pub dim: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceCfg {
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Added to the observed range when the box is sized automatically.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Fixed symmetric box `[-half_width, half_width]^d`.
    pub half_width: Option<f64>,
}

impl Default for SpaceCfg {
    fn default() -> Self {
        Self { bins: default_bins(), margin: default_margin(), half_width: None }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct DriftCfg {
    #[serde(flatten)]
    pub profile: Profile,
    #[serde(default = "one")]
    pub dim: usize,
}

impl DriftCfg {
    pub fn spec(&self) -> nly2d::Result<DriftSpec> {
        DriftSpec::new(self.profile.clone(), self.dim)
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SolverCfg {
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub max_halvings: Option<u32>,
    pub rule: Option<GermRule>,
    /// Start each window at `xi + shift` instead of `xi`.
    pub shift: Option<f64>,
    #[serde(default)]
    pub skip_diagnostics: bool,
}

impl SolverCfg {
    pub fn options(&self) -> CfgResult<PicardOptions> {
        let mut o = PicardOptions::default();
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(Invalid::at("solver.tol", "must be positive"));
            }
            o.tol = t;
        }
        if let Some(m) = self.max_iter {
            if m == 0 {
                return Err(Invalid::at("solver.max_iter", "must be positive"));
            }
            o.max_iter = m;
        }
        if let Some(h) = self.max_halvings {
            o.max_halvings = h;
        }
        if let Some(r) = self.rule {
            o.rule = r;
        }
        if let Some(c) = self.shift {
            o.initial = InitialGuess::Shifted(c);
        }
        o.skip_diagnostics = self.skip_diagnostics;
        Ok(o)
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum LocalTimeMethod {
    /// Histogram of the sampled field.
    #[default]
    Direct,
    /// Convolution of the two one-parameter local times (fBm-sum fields only).
    Convolved,
}

fn lattice_default() -> [u32; 2] {
    [4, 4]
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LocalTimeCfg {
    #[serde(default)]
    pub method: LocalTimeMethod,
    #[serde(default = "lattice_default")]
    pub lattice: [u32; 2],
}

impl Default for LocalTimeCfg {
    fn default() -> Self {
        Self { method: LocalTimeMethod::Direct, lattice: lattice_default() }
    }
}

fn averaged_levels() -> [u32; 2] {
    [5, 5]
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AveragedCfg {
    /// Spatial points; scalars are accepted for `d = 1`.
    pub x: Vec<Point>,
    #[serde(default = "averaged_levels")]
    pub levels: [u32; 2],
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum Point {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Point {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Point::Scalar(v) => vec![*v],
            Point::Vector(v) => v.clone(),
        }
    }
}

fn sew_max_level() -> u32 {
    10
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GermCfg {
    /// Planted defect exponents of the synthetic germ.
    pub beta: [f64; 2],
    #[serde(default = "sew_max_level")]
    pub max_level: u32,
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NlyCfg {
    pub level: u32,
    #[serde(default = "unit2")]
    pub horizon: [f64; 2],
    pub xi: Vec<f64>,
    /// `A(t, x) = coupling t1 t2 f(x)`.
    pub coupling: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SdeCfg {
    pub xi: Vec<f64>,
}

fn scan_seeds() -> usize {
    100
}
fn scan_scales() -> Vec<u32> {
    (1..=6).collect()
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScanCfg {
    pub source: NoiseKind,
    pub hurst: [f64; 2],
    pub level: u32,
    #[serde(default = "unit2")]
    pub horizon: [f64; 2],
    #[serde(default = "one")]
    pub dim: usize,
    pub lambdas: Vec<f64>,
    #[serde(default = "scan_seeds")]
    pub seeds: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "scan_scales")]
    pub scales: Vec<u32>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryCfg {
    /// Independent fBm paths started at the corner value.
    Fbm { hurst: f64 },
    /// `beta_i(t) = corner + amplitude_i sin(frequency_i t)`.
    Sine { amplitude: [f64; 2], frequency: [f64; 2] },
}

fn wave_coupling() -> f64 {
    nly2d::wave::DEFAULT_COUPLING
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WaveCfg {
    pub level: u32,
    #[serde(default = "horizon_one")]
    pub horizon: f64,
    pub boundary: BoundaryCfg,
    #[serde(default)]
    pub corner: f64,
    #[serde(default = "wave_coupling")]
    pub coupling: f64,
}

fn horizon_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MollifyTarget {
    Sde,
    Wave,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShapeChoice {
    Gaussian,
    Triangular,
    #[default]
    Both,
}

impl ShapeChoice {
    pub fn single(self) -> Option<Mollifier> {
        match self {
            ShapeChoice::Gaussian => Some(Mollifier::Gaussian),
            ShapeChoice::Triangular => Some(Mollifier::Triangular),
            ShapeChoice::Both => None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MollifyCfg {
    pub target: MollifyTarget,
    pub eps: Vec<f64>,
    #[serde(default)]
    pub shape: ShapeChoice,
    /// Initial condition for the `sde` target.
    pub xi: Option<Vec<f64>>,
}

/// Condition-checker inputs; which entries are required depends on `which`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionsCfg {
    pub which: nly2d::solver::ConditionSet,
    pub zeta: Option<f64>,
    pub alpha: Option<f64>,
    pub gamma: Option<[f64; 2]>,
    pub eta: Option<f64>,
    pub p: Option<f64>,
    pub q: Option<f64>,
    /// One value for `fbm_plus_deterministic`, two otherwise.
    pub hurst: Option<Vec<f64>>,
    pub d: Option<usize>,
    pub lambda: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_key_is_reported_with_its_section() {
        let c = Config::parse("[noise]\nkind = \"fbm_sum\"\nlevel = 4\n").unwrap();
        let e = c.section::<NoiseCfg>("noise").unwrap_err();
        assert_eq!(e.key.as_deref(), Some("noise.hurst"));
    }

    #[test]
    fn drift_profile_flattens() {
        let c = Config::parse("[drift]\nkind = \"sine\"\namplitude = 1.0\nfrequency = 2.0\nphase = 0.0\n").unwrap();
        let d: DriftCfg = c.section("drift").unwrap();
        assert!(d.spec().unwrap().is_smooth());
    }

    #[test]
    fn unknown_sections_are_rejected() {
        let c = Config::parse("seed = 3\n[nosie]\nx = 1\n").unwrap();
        assert_eq!(c.seed().unwrap(), Some(3));
        let e = c.expect_sections(&["noise"]).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("nosie"));
    }
}
