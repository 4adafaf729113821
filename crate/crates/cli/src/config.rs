//! TOML run configuration: schema-validated, unknown keys rejected, dotted
//! overrides applied before deserialization.

use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use hartree_core::profiles::{MomentumDistribution, PairPotential, RadialDensity};
use hartree_core::solver::SelfConsistency;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: ProfileBlock,
    pub potential: PotentialBlock,
    pub grid: GridBlock,
    pub ensemble: EnsembleBlock,
    #[serde(default)]
    pub evolution: EvolutionBlock,
    #[serde(default)]
    pub fixed_point: FixedPointBlock,
    #[serde(default)]
    pub perturbation: PerturbationBlock,
    #[serde(default)]
    pub diagnostics: DiagnosticsBlock,
    #[serde(default)]
    pub response: ResponseBlock,
    #[serde(default)]
    pub kernel_bound: KernelBoundBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileBlock {
    pub kind: String,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialBlock {
    pub atom_weight: f64,
    #[serde(default = "none_str")]
    pub density_kind: String,
    #[serde(default)]
    pub density_params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub n: usize,
    pub box_length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    pub n_realizations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolutionBlock {
    pub dt: f64,
    pub steps: usize,
    pub mode: String,
    pub store_every: usize,
    pub box_guard_factor: f64,
}

impl Default for EvolutionBlock {
    fn default() -> Self {
        EvolutionBlock {
            dt: 0.01,
            steps: 50,
            mode: "midpoint".into(),
            store_every: 0,
            box_guard_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointBlock {
    pub n_time: usize,
    pub dt: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub cubic: bool,
    pub linear_only: bool,
    pub margin_threshold: f64,
}

impl Default for FixedPointBlock {
    fn default() -> Self {
        FixedPointBlock {
            n_time: 33,
            dt: 0.02,
            tol: 1e-8,
            max_iter: 16,
            cubic: false,
            linear_only: false,
            margin_threshold: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBlock {
    /// none | gaussian_bump
    pub kind: String,
    pub amplitude: f64,
    /// spatial envelope width
    pub width: f64,
    /// momentum envelope width
    pub momentum_width: f64,
}

impl Default for PerturbationBlock {
    fn default() -> Self {
        PerturbationBlock {
            kind: "none".into(),
            amplitude: 0.01,
            width: 2.0,
            momentum_width: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsBlock {
    /// frequency cutoff as a fraction of the maximal lattice radius
    pub xi_cut_factor: f64,
    pub schatten_p: f64,
    pub schatten_s: f64,
    /// empirical | multiplier
    pub gamma_ref: String,
    /// sampled time count for trend reports
    pub sample_times: usize,
}

impl Default for DiagnosticsBlock {
    fn default() -> Self {
        DiagnosticsBlock {
            xi_cut_factor: 0.5,
            schatten_p: 4.1,
            schatten_s: 0.5,
            gamma_ref: "empirical".into(),
            sample_times: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseBlock {
    pub omega_max: f64,
    pub omega_nodes: usize,
    pub xi_max: f64,
    pub xi_nodes: usize,
}

impl Default for ResponseBlock {
    fn default() -> Self {
        ResponseBlock {
            omega_max: 8.0,
            omega_nodes: 48,
            xi_max: 8.0,
            xi_nodes: 48,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBoundBlock {
    pub lambdas: Vec<f64>,
    pub eta_scale: f64,
}

impl Default for KernelBoundBlock {
    fn default() -> Self {
        KernelBoundBlock {
            lambdas: vec![1.0, 2.0, 4.0, 8.0],
            eta_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default)]
    pub directory: String,
}

fn one() -> f64 {
    1.0
}
fn default_alpha() -> f64 {
    5.0
}
fn none_str() -> String {
    "none".into()
}

impl RunConfig {
    pub fn load(path: &std::path::Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: toml::Value = text
            .parse()
            .map_err(|e| AppError::Config(format!("config {} is not valid TOML: {e}", path.display())))?;
        for (key, raw) in overrides {
            apply_override(&mut value, key, raw)?;
        }
        value
            .try_into()
            .map_err(|e| AppError::Config(format!("config schema: {e}")))
    }

    pub fn momentum_distribution(&self) -> Result<MomentumDistribution> {
        let p = &self.profile;
        let f = match p.kind.as_str() {
            "fermi" => MomentumDistribution::fermi(p.temperature, p.mu, p.dim),
            "bose" => MomentumDistribution::bose(p.temperature, p.mu, p.dim),
            "bessel" => MomentumDistribution::bessel(p.alpha, p.dim),
            "gaussian" => MomentumDistribution::gaussian(p.temperature, p.dim),
            other => {
                return Err(AppError::Config(format!("unknown profile kind '{other}'")));
            }
        }?;
        Ok(f)
    }

    pub fn pair_potential(&self) -> Result<PairPotential> {
        let b = &self.potential;
        match b.density_kind.as_str() {
            "none" => Ok(PairPotential::dirac(b.atom_weight)),
            "gaussian" => {
                if b.density_params.len() != 2 {
                    return Err(AppError::Config(
                        "gaussian density needs density_params = [amplitude, width]".into(),
                    ));
                }
                Ok(PairPotential::with_density(
                    b.atom_weight,
                    RadialDensity::Gaussian {
                        amplitude: b.density_params[0],
                        width: b.density_params[1],
                    },
                ))
            }
            other => Err(AppError::Config(format!("unknown density kind '{other}'"))),
        }
    }

    pub fn self_consistency(&self) -> Result<SelfConsistency> {
        match self.evolution.mode.as_str() {
            "midpoint" => Ok(SelfConsistency::Midpoint),
            "frozen" => Ok(SelfConsistency::Frozen),
            other => Err(AppError::Config(format!("unknown evolution mode '{other}'"))),
        }
    }
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() {
        return Err(AppError::Config(format!("empty override key '{key}'")));
    }
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .as_table_mut()
            .ok_or_else(|| AppError::Config(format!("override path '{key}' crosses a non-table")))?
            .entry(part.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| AppError::Config(format!("override path '{key}' crosses a non-table")))?;
    let parsed: toml::Value = if let Ok(b) = raw.parse::<bool>() {
        toml::Value::Boolean(b)
    } else if let Ok(i) = raw.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = raw.parse::<f64>() {
        toml::Value::Float(f)
    } else {
        toml::Value::String(raw.to_string())
    };
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}
