use std::path::PathBuf;

use nls_floer::dynamics::{ContinuationConfig, NewtonConfig};
use nls_floer::floer::FloerConfig;
use nls_floer::model::{HoferConfig, KernelSpec, ModelSpec, Nonlinearity, Potential};
use nls_floer::smalldiv::INV_TWO_PI;
use serde::{Deserialize, Serialize};

/// One run description; every section has defaults, and only the section of
/// the selected pipeline is used.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Must match the subcommand when present.
    pub pipeline: Option<String>,
    pub seed: u64,
    pub model: ModelSpec,
    pub simulate: SimulateConfig,
    pub fixed_points: FixedPointsConfig,
    pub floer: FloerRunConfig,
    pub divisors: DivisorsConfig,
    pub hofer: HoferConfig,
    pub galerkin: GalerkinConfig,
    pub diagnose: DiagnoseConfig,
}

pub fn default_model() -> ModelSpec {
    let k = 4;
    ModelSpec::new(
        KernelSpec::exponential(1.0, k).expect("valid rate"),
        Nonlinearity::Potential {
            potential: Potential::cosine(vec![0.0, 1.0]),
        },
        0.05,
        k,
    )
    .expect("valid default model")
}

impl Default for Config {
    fn default() -> Self {
        Self {
            pipeline: None,
            seed: 0,
            model: default_model(),
            simulate: SimulateConfig::default(),
            fixed_points: FixedPointsConfig::default(),
            floer: FloerRunConfig::default(),
            divisors: DivisorsConfig::default(),
            hofer: HoferConfig::default(),
            galerkin: GalerkinConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialState {
    /// `e^{inx}/√(2π)`
    Mode { mode: i64 },
    /// Coefficients `[re, im]` for `n = -k..=k`; normalized before use.
    Coeffs { coeffs: Vec<[f64; 2]> },
    /// Seeded random point on the unit sphere.
    Random { random: bool },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub initial: InitialState,
    pub t0: f64,
    pub t1: f64,
    pub steps: usize,
    /// Rows in the trajectory CSV.
    pub report_every: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            initial: InitialState::Random { random: true },
            t0: 0.0,
            t1: 1.0,
            steps: 1000,
            report_every: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointsConfig {
    pub modes: Vec<i64>,
    pub continuation: ContinuationConfig,
    /// Re-check each endpoint with this many times the propagation steps.
    pub verify_factor: usize,
    /// Maximal residual accepted at re-verification.
    pub verify_tol: f64,
    pub distinct_threshold: f64,
}

impl Default for FixedPointsConfig {
    fn default() -> Self {
        Self {
            modes: vec![0, 1, 2, 3],
            continuation: ContinuationConfig {
                newton: NewtonConfig {
                    steps: 2000,
                    ..NewtonConfig::default()
                },
                ..ContinuationConfig::default()
            },
            verify_factor: 2,
            verify_tol: 1e-9,
            distinct_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CutoffChoice {
    /// Both ends at the free fixed point.
    Bump,
    /// Free fixed point on the left, continued fixed point on the right.
    Switch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FloerRunConfig {
    pub mode: i64,
    pub cutoff: CutoffChoice,
    pub t_values: Vec<f64>,
    pub s_half: f64,
    pub n_s: usize,
    pub n_t: usize,
    pub solver: FloerConfig,
    pub continuation: ContinuationConfig,
    /// Propagation steps per unit time for the right boundary orbit.
    pub orbit_steps: usize,
    pub gamma_max: usize,
    /// Also solve with doubled `n_s` and report the energy change.
    pub refine_check: bool,
    /// Stored state used as the initial guess.
    pub guess: Option<PathBuf>,
}

impl Default for FloerRunConfig {
    fn default() -> Self {
        Self {
            mode: 0,
            cutoff: CutoffChoice::Switch,
            t_values: vec![1.0],
            s_half: 4.0,
            n_s: 200,
            n_t: 32,
            solver: FloerConfig::default(),
            continuation: ContinuationConfig::default(),
            orbit_steps: 4096,
            gamma_max: 4,
            refine_check: false,
            guess: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergentsConfig {
    /// Decimal string or exact `a/b`.
    pub x: String,
    pub count: usize,
}

impl Default for ConvergentsConfig {
    fn default() -> Self {
        Self {
            x: INV_TWO_PI.to_string(),
            count: 12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivisorsConfig {
    pub m_max: i64,
    pub n: i64,
    pub convergents: ConvergentsConfig,
}

impl Default for DivisorsConfig {
    fn default() -> Self {
        Self {
            m_max: 2000,
            n: 0,
            convergents: ConvergentsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GalerkinConfig {
    pub k_values: Vec<usize>,
    pub radius: f64,
    pub samples: usize,
    pub t: f64,
}

impl Default for GalerkinConfig {
    fn default() -> Self {
        Self {
            k_values: vec![1, 2, 3],
            radius: 1.0,
            samples: 256,
            t: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    /// Stored Floer states.
    pub states: Vec<PathBuf>,
    /// Stored fixed points, compared pairwise.
    pub points: Vec<PathBuf>,
    /// Defaults to `1..k`.
    pub ells: Option<Vec<usize>>,
    pub alphas: Vec<u32>,
    pub distinct_threshold: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            states: Vec::new(),
            points: Vec::new(),
            ells: None,
            alphas: vec![0, 1, 2],
            distinct_threshold: 1e-3,
        }
    }
}

/// A validation finding with the dotted path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Issue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

pub const PIPELINES: [&str; 7] = ["simulate", "fixed-points", "floer", "divisors", "hofer", "galerkin", "diagnose"];

/// Parses a config document, reporting the field path on failure. An empty
/// document yields the defaults.
pub fn parse(text: &str) -> Result<Config, Issue> {
    if text.trim().is_empty() {
        return Ok(Config::default());
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Issue {
        path: match e.path().to_string().as_str() {
            "." => "<root>".to_string(),
            p => p.to_string(),
        },
        message: e.inner().to_string(),
    })
}

/// Whether the document carries no settings at all.
pub fn is_empty(text: &str) -> bool {
    let t = text.trim();
    t.is_empty() || serde_json::from_str::<serde_json::Value>(t).is_ok_and(|v| v.as_object().is_some_and(|o| o.is_empty()))
}

impl Config {
    /// Checks every section, so the report is meaningful for any pipeline.
    pub fn validate(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        let mut bad = |path: &str, message: String| {
            out.push(Issue {
                path: path.to_string(),
                message,
            })
        };
        let k = self.model.bandwidth();
        if let Some(p) = &self.pipeline {
            if !PIPELINES.contains(&p.as_str()) {
                bad("pipeline", format!("unknown pipeline {p:?}"));
            }
        }

        let s = &self.simulate;
        if !(s.t1.is_finite() && s.t0.is_finite()) {
            bad("simulate.t1", "times must be finite".into());
        }
        if s.steps == 0 {
            bad("simulate.steps", "must be positive".into());
        }
        if s.report_every == 0 {
            bad("simulate.report_every", "must be positive".into());
        }
        match &s.initial {
            InitialState::Mode { mode } if mode.unsigned_abs() as usize > k => {
                bad("simulate.initial.mode", format!("outside bandwidth {k}"))
            }
            InitialState::Coeffs { coeffs } if coeffs.len() != 2 * k + 1 => {
                bad("simulate.initial.coeffs", format!("expected {} entries", 2 * k + 1))
            }
            InitialState::Random { random: false } => {
                bad("simulate.initial.random", "set to true or give mode/coeffs".into())
            }
            _ => {}
        }

        let fp = &self.fixed_points;
        if fp.modes.is_empty() {
            bad("fixed_points.modes", "at least one mode".into());
        }
        for (i, n) in fp.modes.iter().enumerate() {
            if n.unsigned_abs() as usize > k {
                bad(&format!("fixed_points.modes[{i}]"), format!("mode {n} outside bandwidth {k}"));
            }
        }
        if fp.verify_factor == 0 {
            bad("fixed_points.verify_factor", "must be positive".into());
        }
        check_continuation(&fp.continuation, "fixed_points.continuation", &mut bad);

        let fl = &self.floer;
        if fl.mode.unsigned_abs() as usize > k {
            bad("floer.mode", format!("outside bandwidth {k}"));
        }
        if fl.t_values.is_empty() {
            bad("floer.t_values", "at least one value".into());
        }
        for (i, t) in fl.t_values.iter().enumerate() {
            let path = format!("floer.t_values[{i}]");
            if !(t.is_finite() && *t >= 0.0) {
                bad(&path, "must be finite and ≥ 0".into());
            } else if fl.cutoff == CutoffChoice::Switch && *t < 1.0 {
                bad(&path, "the switch cutoff needs T ≥ 1".into());
            } else {
                let reach = match fl.cutoff {
                    CutoffChoice::Switch => 0.0,
                    CutoffChoice::Bump if *t > 0.0 => 2.0 * t + 1.0,
                    CutoffChoice::Bump => 0.0,
                };
                if reach > fl.s_half || (*t > 0.0 && fl.s_half < 1.0) {
                    bad(&path, format!("cutoff ramp leaves the window [-{0}, {0}]", fl.s_half));
                }
            }
        }
        if !(fl.s_half > 0.0 && fl.s_half.is_finite()) {
            bad("floer.s_half", "must be positive".into());
        }
        if fl.n_s < 16 {
            bad("floer.n_s", "must be ≥ 16".into());
        }
        if fl.n_t < 8 {
            bad("floer.n_t", "must be ≥ 8".into());
        }
        if !(fl.solver.tol > 0.0) {
            bad("floer.solver.tol", "must be positive".into());
        }
        if fl.orbit_steps == 0 {
            bad("floer.orbit_steps", "must be positive".into());
        }
        check_continuation(&fl.continuation, "floer.continuation", &mut bad);

        let d = &self.divisors;
        if d.m_max <= d.n.abs() {
            bad("divisors.m_max", format!("must exceed |n| = {}", d.n.abs()));
        }
        if d.convergents.count == 0 {
            bad("divisors.convergents.count", "must be positive".into());
        }

        if self.hofer.t_nodes < 2 {
            bad("hofer.t_nodes", "need at least two nodes".into());
        }
        if self.hofer.starts == 0 {
            bad("hofer.starts", "must be positive".into());
        }

        let g = &self.galerkin;
        for (i, kk) in g.k_values.iter().enumerate() {
            if *kk >= k {
                bad(&format!("galerkin.k_values[{i}]"), format!("must be below the model bandwidth {k}"));
            }
        }
        if !(g.radius >= 0.0 && g.radius.is_finite()) {
            bad("galerkin.radius", "must be finite and ≥ 0".into());
        }
        if g.samples == 0 {
            bad("galerkin.samples", "must be positive".into());
        }

        let dg = &self.diagnose;
        for (i, a) in dg.alphas.iter().enumerate() {
            if *a > 2 {
                bad(&format!("diagnose.alphas[{i}]"), "derivative order must be 0, 1 or 2".into());
            }
        }
        if let Some(ells) = &dg.ells {
            if ells.windows(2).any(|w| w[1] <= w[0]) {
                bad("diagnose.ells", "must be increasing".into());
            }
        }
        out
    }
}

fn check_continuation(c: &ContinuationConfig, path: &str, bad: &mut impl FnMut(&str, String)) {
    if c.eps_steps == 0 {
        bad(&format!("{path}.eps_steps"), "must be positive".into());
    }
    if c.newton.steps == 0 {
        bad(&format!("{path}.newton.steps"), "must be positive".into());
    }
    if !(c.newton.tol > 0.0) {
        bad(&format!("{path}.newton.tol"), "must be positive".into());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gives_defaults() {
        assert!(is_empty("  "));
        assert!(is_empty("{}"));
        assert!(!is_empty("{\"seed\": 1}"));
        let c = parse("").unwrap();
        assert!(c.validate().is_empty());
        assert_eq!(c.divisors.m_max, 2000);
    }

    #[test]
    fn unknown_field_reports_path() {
        let e = parse(r#"{"floer": {"solver": {"tolerance": 1}}}"#).unwrap_err();
        assert_eq!(e.path, "floer.solver.tolerance");
        assert!(e.message.contains("tolerance"));
        let e = parse(r#"{"divisors": {"m_max": "x"}}"#).unwrap_err();
        assert_eq!(e.path, "divisors.m_max");
    }

    #[test]
    fn validation_paths() {
        let c = parse(r#"{"floer": {"t_values": [0.5], "n_s": 8}, "fixed_points": {"modes": [0, 9]}}"#).unwrap();
        let paths: Vec<String> = c.validate().into_iter().map(|i| i.path).collect();
        assert!(paths.contains(&"floer.t_values[0]".to_string()));
        assert!(paths.contains(&"floer.n_s".to_string()));
        assert!(paths.contains(&"fixed_points.modes[1]".to_string()));
    }

    #[test]
    fn round_trip() {
        let c = Config::default();
        let text = serde_json::to_string(&c).unwrap();
        let back = parse(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
