//! Optional TOML configuration with one section per module. Every key is
//! optional; values left out keep their defaults, and command-line flags
//! override whatever the file set.

use echopt::ech::{AfpPolicy, BufferMode, EchConfig};
use echopt::Error;
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub ech: EchSection,
    #[serde(default)]
    pub solver: SolverSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// nfz5, no_nfz, or single_nfz.
    pub name: Option<String>,
    pub intervals: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchSection {
    pub eta_tol: Option<f64>,
    pub eps_tol: Option<f64>,
    pub zeta: Option<f64>,
    pub segmentation_penalty: Option<f64>,
    pub beta: Option<f64>,
    /// "fixed" or "adaptive".
    pub buffer_mode: Option<String>,
    /// "practical" or "strict".
    pub afp_policy: Option<String>,
    pub samples_per_interval: Option<usize>,
    pub max_iterations: Option<usize>,
    pub feasibility_tolerance: Option<f64>,
    pub audit_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub tol_kkt: Option<f64>,
    pub tol_primal: Option<f64>,
    pub max_iterations: Option<usize>,
}

pub fn parse_policy(s: &str) -> Result<AfpPolicy, Error> {
    match s {
        "practical" => Ok(AfpPolicy::Practical),
        "strict" => Ok(AfpPolicy::Strict),
        other => Err(Error::ModelInvalid {
            reason: format!("unknown repair policy {other:?}; expected practical or strict"),
        }),
    }
}

pub fn parse_buffer_mode(s: &str) -> Result<BufferMode, Error> {
    match s {
        "fixed" => Ok(BufferMode::Fixed),
        "adaptive" => Ok(BufferMode::Adaptive),
        other => Err(Error::ModelInvalid {
            reason: format!("unknown buffer mode {other:?}; expected fixed or adaptive"),
        }),
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ModelInvalid {
            reason: format!("config {}: {e}", path.display()),
        })?;
        Self::parse(&text).map_err(|e| Error::ModelInvalid {
            reason: format!("config {}: {e}", path.display()),
        })
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Copies every present key onto `cfg`.
    pub fn apply(&self, cfg: &mut EchConfig) -> Result<(), Error> {
        let e = &self.ech;
        set(&mut cfg.eta_tol, e.eta_tol);
        set(&mut cfg.eps_tol, e.eps_tol);
        set(&mut cfg.zeta, e.zeta);
        set(&mut cfg.segmentation_penalty, e.segmentation_penalty);
        if e.beta.is_some() {
            cfg.beta = e.beta;
        }
        if let Some(s) = &e.buffer_mode {
            cfg.buffer_mode = parse_buffer_mode(s)?;
        }
        if let Some(s) = &e.afp_policy {
            cfg.afp_policy = parse_policy(s)?;
        }
        set(&mut cfg.samples_per_interval, e.samples_per_interval);
        set(&mut cfg.max_iterations, e.max_iterations);
        set(&mut cfg.feasibility_tolerance, e.feasibility_tolerance);
        set(&mut cfg.audit_tolerance, e.audit_tolerance);

        let s = &self.solver;
        set(&mut cfg.solver.tol_kkt, s.tol_kkt);
        set(&mut cfg.solver.tol_primal, s.tol_primal);
        set(&mut cfg.solver.max_iterations, s.max_iterations);
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
