//! `run` and `compare`.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use passiflow::diagnostics::{certify, decay_exponent, CertificateReport, CheckResult};
use passiflow::flow::{
    integrate, integrate_closed_form_m1, integrate_nesterov, max_theta_deviation,
    nesterov_parameters, rhs_m0, AnchorKind, FlowConfig, FlowError, GeneratorModel,
    IntegrationPath, Trajectory,
};
use passiflow::generator::{verify_passivity, PassivityReport};
use passiflow::ode::Stats;
use passiflow::policy::NumericPolicy;
use passiflow::schedules::{AlphaSchedule, GammaSchedule};

use crate::config::{read_json, PathChoice, ResolvedRun, RunConfig};
use crate::output::fmt_f64;
use crate::CliError;

pub const CHECK_PASSIVITY: &str = "passivity";
pub const CHECK_GRADIENT_FLOW: &str = "gradient-flow-equivalence";
pub const CHECK_GAP_EXPONENT: &str = "gap-decay-exponent";
pub const CHECK_BOUND_EXPONENT: &str = "bound-decay-exponent";

/// Fit window for decay exponents when the configuration sets none.
pub const DEFAULT_DECAY_WINDOW: [f64; 2] = [5.0, 50.0];
pub const MIN_DECAY_EXPONENT: f64 = 1.9;
pub const MAX_BOUND_EXPONENT: f64 = 2.1;
/// Absolute agreement of the static-generator velocity with −∇f.
pub const GRADIENT_FLOW_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub name: String,
    pub path: IntegrationPath,
    pub dim: usize,
    pub order: usize,
    pub anchor: AnchorKind,
    pub label: &'static str,
    pub e0: f64,
    pub psi_lower: f64,
    pub lyapunov_relative_residual: Option<f64>,
    pub passivity: Option<PassivityReport>,
    pub gradient_flow_equivalence: Option<&'static str>,
    pub gap_decay_exponent: Option<f64>,
    pub bound_decay_exponent: Option<f64>,
    pub max_conservation_residual: f64,
    pub min_rate_margin: f64,
    pub min_theta_margin: Option<f64>,
    pub final_theta: Vec<f64>,
    pub final_gap: f64,
    pub checks: Vec<CheckResult>,
    pub stats: Stats,
    pub passed: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub csv: String,
    pub summary: RunSummary,
    pub trajectory: Trajectory,
    pub report: CertificateReport,
}

/// Policy with the configuration's slack overrides applied.
pub fn effective_policy(config: &RunConfig, base: &NumericPolicy) -> NumericPolicy {
    let mut p = base.clone();
    if let Some(d) = &config.diagnostics {
        if let Some(v) = d.conservation_rel {
            p.conservation_rel = v;
        }
        if let Some(v) = d.rate_bound_slack {
            p.rate_bound_slack = v;
        }
    }
    p
}

pub fn load_run(path: &Path, policy: &NumericPolicy) -> Result<ResolvedRun, CliError> {
    let (config, base): (RunConfig, _) = read_json(path)?;
    config.resolve(&base, policy)
}

fn flow_err(e: FlowError) -> CliError {
    match e {
        FlowError::Ode(o) => CliError::Integrator(o.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

pub fn integrate_path(flow: &FlowConfig, path: PathChoice) -> Result<Trajectory, CliError> {
    match path {
        PathChoice::Auto | PathChoice::FirstOrder => integrate(flow),
        PathChoice::SecondOrder => integrate_closed_form_m1(flow),
        PathChoice::Nesterov => integrate_nesterov(flow),
    }
    .map_err(flow_err)
}

/// Max |θ̇ + ∇f(θ)| over samples when the static generator reduces to
/// gradient flow; `None` when the reduction does not apply.
pub fn gradient_flow_gap(flow: &FlowConfig, traj: &Trajectory) -> Option<f64> {
    let s = &flow.schedules;
    let (GammaSchedule::Constant { value: g }, AlphaSchedule::Constant { value: a }) =
        (&s.gamma, &s.alpha)
    else {
        return None;
    };
    let applies = matches!(flow.generator, GeneratorModel::Static)
        && s.psi.is_zero()
        && flow.preconditioner.is_none()
        && (a * a - g).abs() <= 4.0 * f64::EPSILON * g.abs();
    if !applies {
        return None;
    }
    let worst = traj
        .samples
        .iter()
        .map(|smp| {
            let (dtheta, _) = rhs_m0(flow, smp.t, &smp.theta, &smp.v);
            let grad = flow.objective.gradient(&smp.theta);
            dtheta
                .iter()
                .zip(&grad)
                .map(|(d, g)| (d + g).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Some(worst)
}

fn csv_for(flow: &FlowConfig, traj: &Trajectory, report: &CertificateReport) -> String {
    let n = flow.dim();
    let mut out = String::from("t");
    for k in 0..n {
        let _ = write!(out, ",theta_{k}");
    }
    out.push_str(",f,gap,V,U,conservation_residual,rate_bound_margin\n");
    for (s, r) in traj.samples.iter().zip(&report.samples) {
        out.push_str(&fmt_f64(s.t));
        for th in &s.theta {
            out.push(',');
            out.push_str(&fmt_f64(*th));
        }
        for v in [
            r.f,
            r.gap,
            r.v_storage,
            r.u,
            r.conservation_residual,
            r.rate_margin,
        ] {
            out.push(',');
            out.push_str(&fmt_f64(v));
        }
        out.push('\n');
    }
    out
}

pub fn execute(
    run: &ResolvedRun,
    policy: &NumericPolicy,
    seed: u64,
) -> Result<RunOutcome, CliError> {
    let start = Instant::now();
    let policy = effective_policy(&run.config, policy);
    let flow = &run.flow;
    flow.validate(&policy)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let traj = integrate_path(flow, run.path)?;
    let report = certify(flow, &traj, &policy).map_err(|e| CliError::Config(e.to_string()))?;
    let mut checks = report.checks.clone();

    let passivity = run
        .realization
        .as_ref()
        .map(|g| verify_passivity(g, run.config.passivity_samples, seed, &policy));
    if let Some(p) = &passivity {
        checks.push(CheckResult {
            name: CHECK_PASSIVITY.into(),
            passed: p.passed,
            worst: p.max_rel_violation,
            worst_t: f64::NAN,
            tolerance: policy.passivity_rel,
        });
    }

    let gf = gradient_flow_gap(flow, &traj);
    if let Some(gap) = gf {
        let scale = traj
            .samples
            .iter()
            .map(|s| {
                flow.objective
                    .gradient(&s.theta)
                    .iter()
                    .fold(1.0f64, |a, b| a.max(b.abs()))
            })
            .fold(1.0, f64::max);
        checks.push(CheckResult {
            name: CHECK_GRADIENT_FLOW.into(),
            passed: gap <= GRADIENT_FLOW_TOL * scale,
            worst: gap,
            worst_t: f64::NAN,
            tolerance: GRADIENT_FLOW_TOL * scale,
        });
    }

    let (mut gap_exp, mut bound_exp) = (None, None);
    if nesterov_parameters(flow).is_some() && flow.anchored_at_minimizer() {
        let [lo, hi] = run
            .config
            .diagnostics
            .as_ref()
            .and_then(|d| d.decay_window)
            .unwrap_or(DEFAULT_DECAY_WINDOW);
        let ts: Vec<f64> = report.samples.iter().map(|s| s.t).collect();
        let gaps: Vec<f64> = report.samples.iter().map(|s| s.gap).collect();
        let bounds: Vec<f64> = report
            .samples
            .iter()
            .map(|s| (report.e0 - report.psi_lower) / flow.schedules.gamma.eval(s.t).value)
            .collect();
        gap_exp = decay_exponent(&ts, &gaps, lo, hi);
        bound_exp = decay_exponent(&ts, &bounds, lo, hi);
        if let Some(p) = gap_exp {
            checks.push(CheckResult {
                name: CHECK_GAP_EXPONENT.into(),
                passed: p >= MIN_DECAY_EXPONENT,
                worst: p,
                worst_t: f64::NAN,
                tolerance: MIN_DECAY_EXPONENT,
            });
        }
        if let Some(p) = bound_exp {
            checks.push(CheckResult {
                name: CHECK_BOUND_EXPONENT.into(),
                passed: (MIN_DECAY_EXPONENT..=MAX_BOUND_EXPONENT).contains(&p),
                worst: p,
                worst_t: f64::NAN,
                tolerance: MAX_BOUND_EXPONENT,
            });
        }
    }

    let last = report.samples.last().expect("non-empty report");
    let csv = csv_for(flow, &traj, &report);
    let passed = checks.iter().all(|c| c.passed);
    let summary = RunSummary {
        name: run.config.name.clone(),
        path: traj.path,
        dim: flow.dim(),
        order: flow.order(),
        anchor: flow.anchor_kind,
        label: report.label,
        e0: report.e0,
        psi_lower: report.psi_lower,
        lyapunov_relative_residual: run.realization.as_ref().map(|g| g.relative_residual()),
        passivity,
        gradient_flow_equivalence: gf.map(|g| {
            if g <= GRADIENT_FLOW_TOL {
                "exact"
            } else {
                "approximate"
            }
        }),
        gap_decay_exponent: gap_exp,
        bound_decay_exponent: bound_exp,
        max_conservation_residual: report.max_conservation_residual(),
        min_rate_margin: report.min_rate_margin(),
        min_theta_margin: report
            .samples
            .iter()
            .filter_map(|s| s.theta_margin)
            .reduce(f64::min),
        final_theta: traj.last().theta.clone(),
        final_gap: last.gap,
        checks,
        stats: traj.stats.clone(),
        passed,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(RunOutcome {
        csv,
        summary,
        trajectory: traj,
        report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub name: String,
    pub max_theta_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const COMPARE_TOL: f64 = 1e-6;

/// First-order pipeline against the scalar-generator second-order form.
pub fn compare(run: &ResolvedRun) -> Result<CompareSummary, CliError> {
    let flow = &run.flow;
    if flow.generator.scalar_parts().is_none() {
        return Err(CliError::Config(
            "compare needs a generator of order 1".into(),
        ));
    }
    let a = integrate(flow).map_err(flow_err)?;
    let b = integrate_closed_form_m1(flow).map_err(flow_err)?;
    let dev = max_theta_deviation(&a, &b);
    Ok(CompareSummary {
        name: run.config.name.clone(),
        max_theta_deviation: dev,
        tolerance: COMPARE_TOL,
        passed: dev <= COMPARE_TOL,
    })
}
