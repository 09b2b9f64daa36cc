//! Run configuration: a JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use iegds_core::conic::SolveSettings;
use iegds_core::dispatch::AlgorithmSettings;
use iegds_core::game::GasModelChoice;
use iegds_core::netmodel::CaseKnobs;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmConfig {
    pub max_outer: usize,
    pub rho_seed: f64,
    pub violation_tol: f64,
    pub bracket_rel_width: f64,
    pub pressure_weights: (f64, f64),
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        let d = AlgorithmSettings::default();
        AlgorithmConfig {
            max_outer: d.max_outer,
            rho_seed: d.rho_seed,
            violation_tol: d.violation_tol,
            bracket_rel_width: d.bracket_rel_width,
            pressure_weights: d.pressure_weights,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub eps_abs: f64,
    pub eps_gap: f64,
    pub max_iter: u32,
    pub deterministic_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolveSettings::default();
        SolverConfig {
            eps_abs: d.eps_abs,
            eps_gap: d.eps_gap,
            max_iter: d.max_iter,
            deterministic_seed: d.deterministic_seed,
        }
    }
}

/// On-disk run configuration. `network` is the only required field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: PathBuf,
    /// Model for `solve`: misoc, pwa, fixed_dir_soc, soc_pen, soc_scp.
    #[serde(default = "default_model")]
    pub model: String,
    /// Region count for the piecewise model.
    #[serde(default = "default_r")]
    pub r: usize,
    /// Penalty weight of the soc_pen baseline.
    #[serde(default = "default_pen_weight")]
    pub soc_pen_weight: f64,
    /// Round limit of the soc_scp baseline.
    #[serde(default = "default_scp_rounds")]
    pub soc_scp_rounds: usize,
    /// Models run per case in `batch`.
    #[serde(default = "default_models")]
    pub models: Vec<String>,
    /// Seeds of the generated cases in `batch`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub knobs: CaseKnobs,
    #[serde(default)]
    pub algorithm: AlgorithmConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_model() -> String {
    "misoc".into()
}

fn default_r() -> usize {
    20
}

fn default_pen_weight() -> f64 {
    0.1
}

fn default_scp_rounds() -> usize {
    10
}

fn default_models() -> Vec<String> {
    vec!["misoc".into(), "pwa20".into(), "pwa45".into()]
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("config {} does not match the schema", path.display()))?;
        if cfg.r < 2 {
            bail!("config field r must be at least 2, got {}", cfg.r);
        }
        Ok(cfg)
    }

    pub fn algorithm_settings(&self) -> AlgorithmSettings {
        AlgorithmSettings {
            max_outer: self.algorithm.max_outer,
            rho_seed: self.algorithm.rho_seed,
            violation_tol: self.algorithm.violation_tol,
            bracket_rel_width: self.algorithm.bracket_rel_width,
            pressure_weights: self.algorithm.pressure_weights,
            solver: SolveSettings {
                eps_abs: self.solver.eps_abs,
                eps_gap: self.solver.eps_gap,
                max_iter: self.solver.max_iter,
                deterministic_seed: self.solver.deterministic_seed,
                verbose: false,
            },
        }
    }
}

/// Parsed `--model` / models-list entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSpec {
    Game(GasModelChoice),
    FixedDirSoc,
    SocPen,
    SocScp,
}

impl ModelSpec {
    /// Accepts misoc, pwa (using `default_r`), pwaNN, and the baselines.
    pub fn parse(name: &str, default_r: usize) -> Result<Self> {
        let spec = match name {
            "misoc" => ModelSpec::Game(GasModelChoice::Misoc),
            "pwa" => ModelSpec::Game(GasModelChoice::Pwa { r: default_r }),
            "fixed_dir_soc" => ModelSpec::FixedDirSoc,
            "soc_pen" => ModelSpec::SocPen,
            "soc_scp" => ModelSpec::SocScp,
            other => match other.strip_prefix("pwa").and_then(|s| s.parse::<usize>().ok()) {
                Some(r) if r >= 2 => ModelSpec::Game(GasModelChoice::Pwa { r }),
                _ => bail!("unknown model \"{other}\" (expected misoc, pwa, pwaNN, fixed_dir_soc, soc_pen, soc_scp)"),
            },
        };
        Ok(spec)
    }

    pub fn label(&self, default_r: usize) -> String {
        match self {
            ModelSpec::Game(GasModelChoice::Misoc) => "misoc".into(),
            ModelSpec::Game(GasModelChoice::Pwa { r }) => format!("pwa{r}"),
            ModelSpec::FixedDirSoc => "fixed_dir_soc".into(),
            ModelSpec::SocPen => "soc_pen".into(),
            ModelSpec::SocScp => {
                let _ = default_r;
                "soc_scp".into()
            }
        }
    }
}
