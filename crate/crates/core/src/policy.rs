//! Numeric tolerances shared by every module.
//!
//! All thresholds live in one record so a run can tighten or relax them
//! without touching code. The command-line tool reads an override file from
//! the `PASSIFLOW_NUMERIC_POLICY` environment variable; missing fields keep
//! their defaults.

use serde::{Deserialize, Serialize};
use std::path::Path;

/// Name of the environment variable pointing at a JSON override file.
pub const POLICY_ENV_VAR: &str = "PASSIFLOW_NUMERIC_POLICY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericPolicy {
    /// Relative symmetry tolerance: max|S − Sᵀ| ≤ tol·max|S|.
    pub symmetry_rel: f64,
    /// Pivot threshold relative to ‖A‖∞ below which a matrix is singular.
    pub singular_pivot_rel: f64,
    /// Lyapunov residual bound relative to ‖Q‖∞.
    pub lyapunov_residual_rel: f64,
    /// Storage-identity violation bound relative to the term magnitudes.
    pub passivity_rel: f64,
    /// Analytic vs central-difference derivative agreement for schedules.
    pub schedule_derivative_rel: f64,
    /// Smallest admissible |α(t)|.
    pub alpha_min: f64,
    /// Largest admissible ∂ψ/∂t.
    pub psi_time_derivative_max: f64,
    /// Default adaptive integrator relative tolerance.
    pub rtol: f64,
    /// Default adaptive integrator absolute tolerance.
    pub atol: f64,
    /// Adaptive step below which integration aborts.
    pub min_step: f64,
    /// Conservation residual bound, relative to max(|E₀|, 1).
    pub conservation_rel: f64,
    /// Rate-bound slack, scaled by 1 + |E₀|.
    pub rate_bound_slack: f64,
    /// Slack on W(t) monotonicity, scaled by max(|E₀|, 1).
    pub w_monotone_slack: f64,
    /// Slack on ∂U/∂t ≤ 0, scaled by max(|E₀|, 1).
    pub du_dt_slack: f64,
    /// Coordinate identity ‖v − γ(θ−θ_c)‖∞ ≤ tol·(1 + ‖v‖∞).
    pub coordinate_identity_rel: f64,
    /// Sign-inventory slack, scaled by max(|E₀|, 1).
    pub sign_slack: f64,
    /// Slack on V_T monotonicity relative to V_T(t₀).
    pub total_lyapunov_slack: f64,
}

impl Default for NumericPolicy {
    fn default() -> Self {
        Self {
            symmetry_rel: 1e-12,
            singular_pivot_rel: 1e-14,
            lyapunov_residual_rel: 1e-10,
            passivity_rel: 1e-10,
            schedule_derivative_rel: 1e-6,
            alpha_min: 1e-9,
            psi_time_derivative_max: 1e-12,
            rtol: 1e-9,
            atol: 1e-12,
            min_step: 1e-12,
            conservation_rel: 1e-6,
            rate_bound_slack: 1e-8,
            w_monotone_slack: 1e-9,
            du_dt_slack: 1e-10,
            coordinate_identity_rel: 1e-6,
            sign_slack: 1e-9,
            total_lyapunov_slack: 1e-8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("cannot read numeric policy file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed numeric policy file {path}: {message}")]
    Parse { path: String, message: String },
}

impl NumericPolicy {
    pub fn from_json_str(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn from_file(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text).map_err(|e| PolicyError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Loads the override named by `PASSIFLOW_NUMERIC_POLICY`, or the
    /// defaults when the variable is unset.
    pub fn from_env() -> Result<Self, PolicyError> {
        match std::env::var_os(POLICY_ENV_VAR) {
            Some(path) if !path.is_empty() => Self::from_file(Path::new(&path)),
            _ => Ok(Self::default()),
        }
    }
}
