//! Experiment configuration files.
//!
//! Configs are JSON documents with a versioned `schema` field. Parsing is
//! strict: unknown keys anywhere in the document are rejected.

use crate::base_space::{BaseSpace, TestFunction};
use crate::error::{Error, Result};
use crate::functionals::Functional;
use crate::mixing::{MixingMeasure, TabulatedDensity, TailPolicy, WeakRate};
use crate::poisson::TruncationPolicy;
use crate::spectral::Solver;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const SCHEMA: &str = "bdlab/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    /// Atom weights w_i.
    pub space: Vec<f64>,
    pub mixing: MixingConfig,
    #[serde(default)]
    pub truncation: TruncationConfig,
    #[serde(default)]
    pub battery: Vec<FunctionalConfig>,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_mc_samples() -> u64 {
    crate::dirichlet::DEFAULT_MC_SAMPLES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixingConfig {
    PointMass {
        value: f64,
    },
    Gamma {
        shape: f64,
        rate: f64,
    },
    FiniteDiscrete {
        /// (location, probability) pairs.
        atoms: Vec<(f64, f64)>,
    },
    Tabulated {
        /// Two-column CSV `s,density`, resolved against the config directory.
        path: PathBuf,
        #[serde(default)]
        tail: TailConfig,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailConfig {
    #[default]
    Compact,
    Truncated,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    #[serde(default)]
    pub tail_target: Option<f64>,
    #[serde(default)]
    pub caps: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalConfig {
    Linear { f: Vec<f64> },
    Constant { value: f64 },
    ExpNeg { h: Vec<f64> },
    Tanh { h: Vec<f64> },
    Cos { h: Vec<f64> },
    SinCos { h1: Vec<f64>, h2: Vec<f64> },
    Indicator { h: Vec<f64>, threshold: f64 },
    IndicatorEmpty,
    Clipped { f: Vec<f64>, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaConfig {
    Constant { value: f64 },
    Power { coefficient: f64, exponent: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Experiment {
    Mecke,
    Laplace {
        /// Test functions f ≤ 0 for π(e^{γ(f)}).
        functions: Vec<Vec<f64>>,
    },
    Rn {
        pairs: Vec<(f64, f64)>,
        f: Vec<f64>,
    },
    Derivative {
        s: f64,
        #[serde(default = "default_step")]
        h: f64,
    },
    Moments {
        f: Vec<f64>,
    },
    Gap {
        #[serde(default = "default_solver")]
        solver: Solver,
        #[serde(default = "default_grid_nodes")]
        grid_nodes: usize,
    },
    Poincare {
        #[serde(default)]
        constant: Option<f64>,
        #[serde(default = "default_grid_nodes")]
        grid_nodes: usize,
    },
    WeakPoincare {
        alpha: AlphaConfig,
        r_grid: Vec<f64>,
    },
    Counterexample {
        c1: f64,
        c2: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    Simulate {
        t_end: f64,
        #[serde(default)]
        start: Option<Vec<u32>>,
        f: Vec<f64>,
        #[serde(default)]
        trajectory_csv: Option<PathBuf>,
    },
    DumpPmf {
        csv: PathBuf,
    },
}

fn default_step() -> f64 {
    1e-3
}

fn default_solver() -> Solver {
    Solver::Auto
}

fn default_grid_nodes() -> usize {
    1000
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Mecke => "mecke",
            Experiment::Laplace { .. } => "laplace",
            Experiment::Rn { .. } => "rn",
            Experiment::Derivative { .. } => "derivative",
            Experiment::Moments { .. } => "moments",
            Experiment::Gap { .. } => "gap",
            Experiment::Poincare { .. } => "poincare",
            Experiment::WeakPoincare { .. } => "weak-poincare",
            Experiment::Counterexample { .. } => "counterexample",
            Experiment::Simulate { .. } => "simulate",
            Experiment::DumpPmf { .. } => "dump-pmf",
        }
    }
}

/// A config problem located at a JSON path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

fn at(path: impl Into<String>, message: impl std::fmt::Display) -> ConfigError {
    ConfigError {
        path: path.into(),
        message: message.to_string(),
    }
}

/// Parses a config from text, reporting the JSON path of the first
/// offending value.
pub fn parse(text: &str) -> std::result::Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        let message = format!("{inner} (line {}, column {})", inner.line(), inner.column());
        at(e.path().to_string(), message)
    })?;
    if config.schema != SCHEMA {
        return Err(at(
            "schema",
            format!("unsupported schema `{}`, expected `{SCHEMA}`", config.schema),
        ));
    }
    Ok(config)
}

pub fn load(path: &Path) -> std::result::Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| at("", format!("{}: {e}", path.display())))?;
    parse(&text)
}

fn test_function(path: &str, values: &[f64], atoms: usize) -> std::result::Result<TestFunction, ConfigError> {
    if values.len() != atoms {
        return Err(at(path, format!("expected {atoms} values, got {}", values.len())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(at(format!("{path}[{i}]"), "value must be finite"));
    }
    TestFunction::new(values.to_vec()).map_err(|e| at(path, e))
}

/// Everything a run needs, built and checked from a parsed config.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub space: BaseSpace,
    pub mixing: MixingMeasure,
    pub policy: TruncationPolicy,
    pub battery: Vec<Functional>,
}

impl ExperimentConfig {
    pub fn space(&self) -> std::result::Result<BaseSpace, ConfigError> {
        if self.space.is_empty() {
            return Err(at("space", "at least one atom is required"));
        }
        for (i, w) in self.space.iter().enumerate() {
            if !(w.is_finite() && *w > 0.0) {
                return Err(at(format!("space[{i}]"), format!("weight must be positive and finite, got {w}")));
            }
        }
        BaseSpace::new(self.space.clone()).map_err(|e| at("space", e))
    }

    pub fn mixing(&self, base_dir: &Path) -> std::result::Result<MixingMeasure, ConfigError> {
        let built: Result<MixingMeasure> = match &self.mixing {
            MixingConfig::PointMass { value } => MixingMeasure::point_mass(*value),
            MixingConfig::Gamma { shape, rate } => MixingMeasure::gamma(*shape, *rate),
            MixingConfig::FiniteDiscrete { atoms } => MixingMeasure::finite_discrete(atoms.clone()),
            MixingConfig::Tabulated { path, tail } => {
                let tail = match tail {
                    TailConfig::Compact => TailPolicy::Compact,
                    TailConfig::Truncated => TailPolicy::Truncated,
                };
                let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                TabulatedDensity::from_csv(&full, tail).map(MixingMeasure::tabulated)
            }
        };
        built.map_err(|e| at("mixing", e))
    }

    pub fn policy(&self, atoms: usize) -> std::result::Result<TruncationPolicy, ConfigError> {
        let mut policy = TruncationPolicy::default();
        if let Some(t) = self.truncation.tail_target {
            if !(t > 0.0 && t < 1.0) {
                return Err(at("truncation.tail_target", format!("must lie in (0, 1), got {t}")));
            }
            policy.tail_target = t;
        }
        if let Some(caps) = &self.truncation.caps {
            if caps.len() != atoms {
                return Err(at("truncation.caps", format!("expected {atoms} caps, got {}", caps.len())));
            }
            policy.caps = Some(caps.clone());
        }
        Ok(policy)
    }

    pub fn functionals(&self, atoms: usize) -> std::result::Result<Vec<Functional>, ConfigError> {
        self.battery
            .iter()
            .enumerate()
            .map(|(j, item)| {
                let p = |field: &str| format!("battery[{j}].{field}");
                let wrap = |r: Result<Functional>| r.map_err(|e| at(format!("battery[{j}]"), e));
                match item {
                    FunctionalConfig::Linear { f } => Ok(Functional::linear(test_function(&p("f"), f, atoms)?)),
                    FunctionalConfig::Constant { value } => Ok(Functional::constant(*value)),
                    FunctionalConfig::ExpNeg { h } => wrap(Functional::exp_neg(test_function(&p("h"), h, atoms)?)),
                    FunctionalConfig::Tanh { h } => wrap(Functional::tanh(test_function(&p("h"), h, atoms)?)),
                    FunctionalConfig::Cos { h } => wrap(Functional::cos(test_function(&p("h"), h, atoms)?)),
                    FunctionalConfig::SinCos { h1, h2 } => wrap(Functional::sin_cos(
                        test_function(&p("h1"), h1, atoms)?,
                        test_function(&p("h2"), h2, atoms)?,
                    )),
                    FunctionalConfig::Indicator { h, threshold } => {
                        Ok(Functional::indicator(test_function(&p("h"), h, atoms)?, *threshold))
                    }
                    FunctionalConfig::IndicatorEmpty => Ok(Functional::indicator_empty()),
                    FunctionalConfig::Clipped { f, lo, hi } => {
                        wrap(Functional::clipped(test_function(&p("f"), f, atoms)?, *lo, *hi))
                    }
                }
            })
            .collect()
    }

    /// Builds and checks every component; `base_dir` resolves relative paths.
    pub fn resolve(&self, base_dir: &Path) -> std::result::Result<Resolved, ConfigError> {
        let space = self.space()?;
        let mixing = self.mixing(base_dir)?;
        let policy = self.policy(space.len())?;
        let battery = self.functionals(space.len())?;
        if self.mc_samples < 2 {
            return Err(at("mc_samples", "at least 2 samples are required"));
        }
        self.check_experiment(space.len())?;
        Ok(Resolved {
            space,
            mixing,
            policy,
            battery,
        })
    }

    fn check_experiment(&self, atoms: usize) -> std::result::Result<(), ConfigError> {
        let e = "experiment";
        match &self.experiment {
            Experiment::Laplace { functions } => {
                if functions.is_empty() {
                    return Err(at(format!("{e}.functions"), "at least one function is required"));
                }
                for (j, f) in functions.iter().enumerate() {
                    test_function(&format!("{e}.functions[{j}]"), f, atoms)?;
                }
            }
            Experiment::Rn { pairs, f } => {
                test_function(&format!("{e}.f"), f, atoms)?;
                if let Some(j) = pairs.iter().position(|(s, t)| !(*s > 0.0 && *t > 0.0)) {
                    return Err(at(format!("{e}.pairs[{j}]"), "scales must be positive"));
                }
            }
            Experiment::Derivative { s, h } => {
                if !(*s > 0.0) {
                    return Err(at(format!("{e}.s"), "scale must be positive"));
                }
                if !(*h > 0.0 && *h < s / 10.0) {
                    return Err(at(format!("{e}.h"), "step must lie in (0, s/10)"));
                }
            }
            Experiment::Moments { f } => {
                test_function(&format!("{e}.f"), f, atoms)?;
            }
            Experiment::WeakPoincare { alpha, r_grid } => {
                if r_grid.is_empty() || r_grid.iter().any(|r| !(*r > 0.0)) {
                    return Err(at(format!("{e}.r_grid"), "r values must be positive and nonempty"));
                }
                if let AlphaConfig::Constant { value } = alpha {
                    if !(*value >= 0.0) {
                        return Err(at(format!("{e}.alpha.value"), "alpha must be nonnegative"));
                    }
                }
            }
            Experiment::Counterexample { c1, weights, .. } => {
                if !(*c1 < 1.0) {
                    return Err(at(format!("{e}.c1"), "the counterexample needs C1 < 1"));
                }
                if let Some(w) = weights {
                    if w.is_empty() || w.iter().any(|x| !(*x > 0.0)) {
                        return Err(at(format!("{e}.weights"), "weights must be positive and nonempty"));
                    }
                }
            }
            Experiment::Simulate { t_end, start, f, .. } => {
                test_function(&format!("{e}.f"), f, atoms)?;
                if !(*t_end > 0.0) {
                    return Err(at(format!("{e}.t_end"), "horizon must be positive"));
                }
                if let Some(k) = start {
                    if k.len() != atoms {
                        return Err(at(format!("{e}.start"), format!("expected {atoms} counts")));
                    }
                }
            }
            _ => {}
        }
        if matches!(self.experiment, Experiment::Poincare { .. } | Experiment::WeakPoincare { .. })
            && self.battery.is_empty()
        {
            return Err(at("battery", "this experiment needs a nonempty battery"));
        }
        Ok(())
    }
}

impl AlphaConfig {
    pub fn rate(&self) -> WeakRate {
        match self {
            AlphaConfig::Constant { value } => WeakRate::Constant(*value),
            AlphaConfig::Power { coefficient, exponent } => WeakRate::Power {
                coefficient: *coefficient,
                exponent: *exponent,
            },
        }
    }
}

impl From<ConfigError> for Error {
    fn from(e: ConfigError) -> Self {
        Error::InvalidArgument(e.to_string())
    }
}
