//! Certificates evaluated along a trajectory.
//!
//! Along exact solutions
//! `U(v,t) + V(x) + I_D − I_ψ + I_Q = E₀` with `U = γ[f(θ(v,t)) − f(θ_c)] + ψ`,
//! `θ(v,t) = v/γ + θ_c` and `E₀ = U(v₀,t₀) + V(x₀)`. Every term but `U` is
//! signed, which yields the rate bounds checked here.

use serde::Serialize;

use crate::flow::{coordinate_identity_error, FlowConfig, FlowSample, Trajectory};
use crate::objectives::bregman;
use crate::policy::NumericPolicy;
use crate::schedules::PsiRegularizer;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("PsiKindUnsupported: the θ̃ bound needs the norm-quadratic regularizer")]
    PsiKindUnsupported,
    #[error("empty trajectory")]
    EmptyTrajectory,
}

/// ½x̂ᵀ(Pm ⊗ Iₙ)x̂.
pub fn storage_v(cfg: &FlowConfig, x: &[f64]) -> f64 {
    cfg.storage(x)
}

/// θ(v, t) = v/γ + θ_c.
pub fn theta_of_v(cfg: &FlowConfig, v: &[f64], t: f64) -> Vec<f64> {
    let g = cfg.schedules.gamma.eval(t).value;
    v.iter()
        .zip(&cfg.anchor)
        .map(|(vi, c)| vi / g + c)
        .collect()
}

/// U(v, t) = γ[f(θ(v,t)) − f(θ_c)] + ψ(v, t).
pub fn conjugate_u(cfg: &FlowConfig, v: &[f64], t: f64) -> f64 {
    let g = cfg.schedules.gamma.eval(t).value;
    let theta = theta_of_v(cfg, v, t);
    let f = cfg.objective.as_ref();
    g * (f.value(&theta) - f.value(&cfg.anchor)) + cfg.schedules.psi.eval(v, t).value
}

/// E₀ = U(v₀, t₀) + V(x₀).
pub fn initial_energy(cfg: &FlowConfig) -> f64 {
    conjugate_u(cfg, &cfg.v0(), cfg.schedules.t0) + storage_v(cfg, &cfg.x0)
}

fn energy_scale(e0: f64) -> f64 {
    e0.abs().max(1.0)
}

/// [U + V + I_D − I_ψ + I_Q − E₀] / max(|E₀|, 1).
pub fn conservation_residual(cfg: &FlowConfig, s: &FlowSample, e0: f64) -> f64 {
    let total = conjugate_u(cfg, &s.v, s.t) + storage_v(cfg, &s.x) + s.i_d - s.i_psi + s.i_q;
    (total - e0) / energy_scale(e0)
}

/// (E₀ − ψ̲)/γ − [f(θ) − f(θ_c)].
pub fn rate_margin(cfg: &FlowConfig, s: &FlowSample, e0: f64) -> f64 {
    let g = cfg.schedules.gamma.eval(s.t).value;
    let f = cfg.objective.as_ref();
    (e0 - cfg.schedules.psi.lower_bound()) / g - (f.value(&s.theta) - f.value(&cfg.anchor))
}

/// Bound on ‖θ̃‖₂ implied by E₀ ≥ ψ: with ψ = ½R‖θ̃‖² + δ this is
/// √(2(E₀ − δ)/R), i.e. (1/γ)·((E₀ − δ)/R_v)^{1/2} for the v-form weight
/// R_v = R/(2γ²).
pub fn theta_bound(psi: &PsiRegularizer, t: f64, e0: f64) -> Result<f64, DiagnosticsError> {
    let PsiRegularizer::NormQuadratic { r, delta, gamma } = psi else {
        return Err(DiagnosticsError::PsiKindUnsupported);
    };
    let g = gamma.eval(t).value;
    let r_v = 0.5 * r.eval(t).0 / (g * g);
    Ok(((e0 - delta).max(0.0) / r_v).sqrt() / g)
}

/// bound − ‖θ − θ_c‖₂ per sample.
pub fn theta_bound_check(
    cfg: &FlowConfig,
    traj: &Trajectory,
    e0: f64,
) -> Result<Vec<f64>, DiagnosticsError> {
    traj.samples
        .iter()
        .map(|s| {
            let norm = s
                .theta
                .iter()
                .zip(&cfg.anchor)
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            Ok(theta_bound(&cfg.schedules.psi, s.t, e0)? - norm)
        })
        .collect()
}

/// W(t) = V(t) − ∫⟨y,u⟩, with the supply integral recovered as
/// U(t₀) − U(t) − I_D + I_ψ.
pub fn passivity_w(cfg: &FlowConfig, s: &FlowSample, u0: f64) -> f64 {
    storage_v(cfg, &s.x) + conjugate_u(cfg, &s.v, s.t) - u0 + s.i_d - s.i_psi
}

/// ∂U/∂t = −γ̇D_f(θ_c, θ(v,t)) + ∂ψ/∂t.
pub fn du_dt(cfg: &FlowConfig, v: &[f64], t: f64) -> f64 {
    let gdot = cfg.schedules.gamma.eval(t).d1;
    let theta = theta_of_v(cfg, v, t);
    -gdot * bregman(cfg.objective.as_ref(), &cfg.anchor, &theta) + cfg.schedules.psi.eval(v, t).dt
}

/// Slope of log(values) against log(t) over samples in [t_lo, t_hi], negated.
/// Values are first replaced by their running maximum from the right, so
/// oscillating series are fitted through their envelope.
pub fn decay_exponent(ts: &[f64], values: &[f64], t_lo: f64, t_hi: f64) -> Option<f64> {
    let mut env = values.to_vec();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(&env)
        .filter(|(t, e)| **t >= t_lo && **t <= t_hi && **e > 0.0)
        .map(|(t, e)| (t.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub t: f64,
    pub f: f64,
    /// f(θ) − f(θ_c).
    pub gap: f64,
    pub v_storage: f64,
    pub u: f64,
    pub w: f64,
    pub conservation_residual: f64,
    pub rate_margin: f64,
    pub theta_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub worst: f64,
    pub worst_t: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub e0: f64,
    pub psi_lower: f64,
    /// "optimality certificate" when θ_c is the known minimizer.
    pub label: &'static str,
    pub samples: Vec<SampleRecord>,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl CertificateReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn max_conservation_residual(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.conservation_residual.abs())
            .fold(0.0, f64::max)
    }

    pub fn min_rate_margin(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.rate_margin)
            .fold(f64::INFINITY, f64::min)
    }
}

/// Tracks the worst value of a quantity that must stay ≤ tolerance.
struct Worst {
    value: f64,
    t: f64,
}

impl Worst {
    fn new() -> Self {
        Self {
            value: f64::NEG_INFINITY,
            t: f64::NAN,
        }
    }

    fn push(&mut self, value: f64, t: f64) {
        if value > self.value || self.t.is_nan() {
            self.value = value;
            self.t = t;
        }
    }

    fn at_most(self, name: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.into(),
            passed: self.value <= tolerance,
            worst: self.value,
            worst_t: self.t,
            tolerance,
        }
    }
}

pub const CHECK_CONSERVATION: &str = "conservation";
pub const CHECK_RATE_BOUND: &str = "rate-bound";
pub const CHECK_THETA_BOUND: &str = "theta-bound";
pub const CHECK_W_MONOTONE: &str = "w-monotone";
pub const CHECK_IQ_MONOTONE: &str = "dissipation-monotone";
pub const CHECK_DU_DT: &str = "du-dt-nonpositive";
pub const CHECK_SIGNS: &str = "sign-inventory";
pub const CHECK_COORDINATES: &str = "coordinate-identity";

/// Evaluates every certificate on `traj`. The θ̃ bound is included only for
/// the norm-quadratic regularizer.
pub fn certify(
    cfg: &FlowConfig,
    traj: &Trajectory,
    policy: &NumericPolicy,
) -> Result<CertificateReport, DiagnosticsError> {
    if traj.samples.is_empty() {
        return Err(DiagnosticsError::EmptyTrajectory);
    }
    let e0 = initial_energy(cfg);
    let scale = energy_scale(e0);
    let psi_lower = cfg.schedules.psi.lower_bound();
    let u0 = conjugate_u(cfg, &cfg.v0(), cfg.schedules.t0);
    let f_anchor = cfg.objective.value(&cfg.anchor);
    let theta_margins = theta_bound_check(cfg, traj, e0).ok();

    let mut samples = Vec::with_capacity(traj.samples.len());
    let mut cons = Worst::new();
    let mut rate = Worst::new();
    let mut theta_w = Worst::new();
    let mut w_mono = Worst::new();
    let mut iq_mono = Worst::new();
    let mut dudt = Worst::new();
    let mut signs = Worst::new();
    let mut prev: Option<(f64, f64)> = None;
    for (k, s) in traj.samples.iter().enumerate() {
        let f = cfg.objective.value(&s.theta);
        let v_storage = storage_v(cfg, &s.x);
        let u = conjugate_u(cfg, &s.v, s.t);
        let w = passivity_w(cfg, s, u0);
        let residual = conservation_residual(cfg, s, e0);
        let margin = rate_margin(cfg, s, e0);
        let theta_margin = theta_margins.as_ref().map(|m| m[k]);

        cons.push(residual.abs(), s.t);
        rate.push(-margin, s.t);
        if let Some(m) = theta_margin {
            theta_w.push(-m, s.t);
        }
        if let Some((w_prev, iq_prev)) = prev {
            w_mono.push(w - w_prev, s.t);
            iq_mono.push(iq_prev - s.i_q, s.t);
        }
        prev = Some((w, s.i_q));
        dudt.push(du_dt(cfg, &s.v, s.t), s.t);
        let psi = cfg.schedules.psi.eval(&s.v, s.t).value;
        let most_negative = [v_storage, s.i_d, s.i_q, -s.i_psi, psi - psi_lower]
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        signs.push(-most_negative, s.t);

        samples.push(SampleRecord {
            t: s.t,
            f,
            gap: f - f_anchor,
            v_storage,
            u,
            w,
            conservation_residual: residual,
            rate_margin: margin,
            theta_margin,
        });
    }

    let mut checks = vec![
        cons.at_most(CHECK_CONSERVATION, policy.conservation_rel),
        rate.at_most(CHECK_RATE_BOUND, policy.rate_bound_slack * (1.0 + e0.abs())),
    ];
    if theta_margins.is_some() {
        checks.push(theta_w.at_most(
            CHECK_THETA_BOUND,
            policy.rate_bound_slack * (1.0 + e0.abs()),
        ));
    }
    if traj.samples.len() > 1 {
        checks.push(w_mono.at_most(CHECK_W_MONOTONE, policy.w_monotone_slack * scale));
        checks.push(iq_mono.at_most(CHECK_IQ_MONOTONE, policy.sign_slack * scale));
    }
    checks.push(dudt.at_most(CHECK_DU_DT, policy.du_dt_slack * scale));
    checks.push(signs.at_most(CHECK_SIGNS, policy.sign_slack * scale));
    let coord = coordinate_identity_error(cfg, traj);
    checks.push(CheckResult {
        name: CHECK_COORDINATES.into(),
        passed: coord <= policy.coordinate_identity_rel,
        worst: coord,
        worst_t: f64::NAN,
        tolerance: policy.coordinate_identity_rel,
    });
    let passed = checks.iter().all(|c| c.passed);
    Ok(CertificateReport {
        e0,
        psi_lower,
        label: if cfg.anchored_at_minimizer() {
            "optimality certificate"
        } else {
            "anchor-relative"
        },
        samples,
        checks,
        passed,
    })
}
