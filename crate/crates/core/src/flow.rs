//! Optimization dynamics driven by a passive generator.
//!
//! The integrated state is laid out as `[x (m·n), v (n), θ (n), I_D, I_ψ, I_Q]`
//! with `x` stored row-major as m rows of length n. `θ` is propagated on its
//! own rather than recovered from `v`, so `v = γ(θ − θ_c)` is a monitored
//! invariant.
//!
//! With a preconditioner M, the input is `u = −αM∇U` and `v̇ = αM⁻¹y`. Storage,
//! dissipation and the supply rate are evaluated on the normalized generator
//! state `x̂ = M⁻¹x` (row by row), in which the interconnection is unchanged.
//!
//! For the static generator (m = 0) there is no `x`; `y = u` and the slot
//! `I_Q` holds the supplied energy `∫α²‖∇U‖²`.

use std::sync::Arc;

use serde::Serialize;

use crate::generator::{block_quad_form, GeneratorRealization};
use crate::linalg::{dot, inverse, Mat};
use crate::objectives::{bregman_with_gradient, Objective};
use crate::ode::{self, linspace, Method, OdeError, Stats};
use crate::policy::NumericPolicy;
use crate::schedules::{
    AlphaSchedule, GammaSchedule, ScheduleError, ScheduleSet, ValidationReport,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlowError {
    #[error("invalid flow configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// The internal passive system.
#[derive(Debug, Clone)]
pub enum GeneratorModel {
    /// m = 0: the generator is the identity map, y = u.
    Static,
    /// Synthesized Hurwitz companion realization.
    Dynamic(GeneratorRealization),
    /// m = 1 with a₀ = 0: ẋ = u, y = p·x, storage ½p‖x‖², no dissipation.
    /// Not Hurwitz, so synthesis refuses it; this is the Nesterov generator.
    Marginal { p: f64 },
}

impl GeneratorModel {
    pub fn order(&self) -> usize {
        match self {
            GeneratorModel::Static => 0,
            GeneratorModel::Dynamic(g) => g.order(),
            GeneratorModel::Marginal { .. } => 1,
        }
    }

    /// (Pm, Qm) for dynamic generators.
    pub fn storage_weights(&self) -> Option<(Mat, Mat)> {
        match self {
            GeneratorModel::Static => None,
            GeneratorModel::Dynamic(g) => Some((g.p.clone(), g.q.clone())),
            GeneratorModel::Marginal { p } => Some((Mat::diag(&[*p]), Mat::zeros(1, 1))),
        }
    }

    /// (a₀, P) when the generator is scalar.
    pub fn scalar_parts(&self) -> Option<(f64, f64)> {
        match self {
            GeneratorModel::Dynamic(g) if g.order() == 1 => Some((g.coeffs[0], g.p[(0, 0)])),
            GeneratorModel::Marginal { p } => Some((0.0, *p)),
            _ => None,
        }
    }
}

/// Invertible n×n preconditioner with its inverse.
#[derive(Debug, Clone)]
pub struct Preconditioner {
    m: Mat,
    m_inv: Mat,
}

impl Preconditioner {
    pub fn new(m: Mat) -> Result<Self, FlowError> {
        let m_inv =
            inverse(&m).map_err(|e| FlowError::BadConfig(format!("preconditioner: {e}")))?;
        Ok(Self { m, m_inv })
    }

    pub fn matrix(&self) -> &Mat {
        &self.m
    }

    pub fn inverse(&self) -> &Mat {
        &self.m_inv
    }
}

fn apply(m: Option<&Mat>, x: &[f64], out: &mut [f64]) {
    match m {
        None => out.copy_from_slice(x),
        Some(m) => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = dot(m.row(i), x);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorKind {
    Theta0,
    KnownMinimizer,
    Explicit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnchorMode {
    Theta0,
    KnownMinimizer,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub generator: GeneratorModel,
    pub preconditioner: Option<Preconditioner>,
    pub schedules: ScheduleSet,
    pub objective: Arc<dyn Objective>,
    pub theta0: Vec<f64>,
    /// θ_c.
    pub anchor: Vec<f64>,
    pub anchor_kind: AnchorKind,
    /// Initial generator state, m·n entries.
    pub x0: Vec<f64>,
    pub method: Method,
    pub output_times: Vec<f64>,
}

pub const DEFAULT_OUTPUT_SAMPLES: usize = 201;

impl FlowConfig {
    /// θ_c = θ₀, x₀ = 0, adaptive integration with the default tolerances.
    pub fn new(
        generator: GeneratorModel,
        schedules: ScheduleSet,
        objective: Arc<dyn Objective>,
        theta0: Vec<f64>,
    ) -> Result<Self, FlowError> {
        let n = objective.dim();
        if theta0.len() != n {
            return Err(FlowError::BadConfig(format!(
                "θ₀ has length {} but the objective has dimension {n}",
                theta0.len()
            )));
        }
        if let GeneratorModel::Dynamic(g) = &generator {
            if g.dim != n {
                return Err(FlowError::BadConfig(format!(
                    "generator dimension {} differs from objective dimension {n}",
                    g.dim
                )));
            }
        }
        if let GeneratorModel::Marginal { p } = generator {
            if !(p > 0.0 && p.is_finite()) {
                return Err(FlowError::BadConfig(format!(
                    "storage weight must be positive, got {p}"
                )));
            }
        }
        let m = generator.order();
        let policy = NumericPolicy::default();
        let output_times = linspace(schedules.t0, schedules.tf, DEFAULT_OUTPUT_SAMPLES);
        Ok(Self {
            generator,
            preconditioner: None,
            objective,
            anchor: theta0.clone(),
            anchor_kind: AnchorKind::Theta0,
            theta0,
            x0: vec![0.0; m * n],
            method: Method::dopri5(policy.rtol, policy.atol),
            output_times,
            schedules,
        })
    }

    pub fn dim(&self) -> usize {
        self.theta0.len()
    }

    pub fn order(&self) -> usize {
        self.generator.order()
    }

    pub fn with_anchor(mut self, mode: AnchorMode) -> Result<Self, FlowError> {
        match mode {
            AnchorMode::Theta0 => {
                self.anchor = self.theta0.clone();
                self.anchor_kind = AnchorKind::Theta0;
            }
            AnchorMode::KnownMinimizer => {
                let m = self.objective.minimizer().ok_or_else(|| {
                    FlowError::BadConfig(format!(
                        "objective {} has no known minimizer",
                        self.objective.name()
                    ))
                })?;
                self.anchor = m.theta.clone();
                self.anchor_kind = AnchorKind::KnownMinimizer;
            }
            AnchorMode::Explicit(c) => {
                if c.len() != self.dim() {
                    return Err(FlowError::BadConfig(format!(
                        "θ_c has length {} but the problem has dimension {}",
                        c.len(),
                        self.dim()
                    )));
                }
                self.anchor = c;
                self.anchor_kind = AnchorKind::Explicit;
            }
        }
        Ok(self)
    }

    pub fn with_x0(mut self, x0: Vec<f64>) -> Result<Self, FlowError> {
        if x0.len() != self.order() * self.dim() {
            return Err(FlowError::BadConfig(format!(
                "x₀ needs {} entries, got {}",
                self.order() * self.dim(),
                x0.len()
            )));
        }
        self.x0 = x0;
        Ok(self)
    }

    pub fn with_preconditioner(mut self, m: Mat) -> Result<Self, FlowError> {
        if m.rows() != self.dim() || m.cols() != self.dim() {
            return Err(FlowError::BadConfig(format!(
                "preconditioner must be {n}x{n}",
                n = self.dim()
            )));
        }
        self.preconditioner = Some(Preconditioner::new(m)?);
        Ok(self)
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        self
    }

    pub fn with_output_times(mut self, times: Vec<f64>) -> Result<Self, FlowError> {
        let (t0, tf) = (self.schedules.t0, self.schedules.tf);
        if times.len() < 2 || times[0] != t0 || *times.last().unwrap() > tf {
            return Err(FlowError::BadConfig(format!(
                "output times must start at t₀ = {t0} and stay within t_f = {tf}"
            )));
        }
        self.output_times = times;
        Ok(self)
    }

    /// Whether θ_c coincides with the objective's known minimizer.
    pub fn anchored_at_minimizer(&self) -> bool {
        self.objective
            .minimizer()
            .map(|m| m.theta == self.anchor)
            .unwrap_or(false)
    }

    /// Schedule validation over the run interval.
    pub fn validate(&self, policy: &NumericPolicy) -> Result<ValidationReport, FlowError> {
        Ok(self.schedules.validate(1000, policy)?)
    }

    /// v₀ = γ(t₀)(θ₀ − θ_c).
    pub fn v0(&self) -> Vec<f64> {
        let g = self.schedules.gamma.eval(self.schedules.t0).value;
        self.theta0
            .iter()
            .zip(&self.anchor)
            .map(|(a, c)| g * (a - c))
            .collect()
    }

    pub fn state_len(&self) -> usize {
        (self.order() + 2) * self.dim() + 3
    }

    pub fn initial_state(&self) -> Vec<f64> {
        let mut y = Vec::with_capacity(self.state_len());
        y.extend_from_slice(&self.x0);
        y.extend(self.v0());
        y.extend_from_slice(&self.theta0);
        y.extend([0.0, 0.0, 0.0]);
        y
    }

    fn m_inv(&self) -> Option<&Mat> {
        self.preconditioner.as_ref().map(|p| p.inverse())
    }

    fn m(&self) -> Option<&Mat> {
        self.preconditioner.as_ref().map(|p| p.matrix())
    }

    /// Generator state mapped row by row through M⁻¹.
    pub fn normalized_state(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; x.len()];
        for (xi, oi) in x.chunks(n).zip(out.chunks_mut(n)) {
            apply(self.m_inv(), xi, oi);
        }
        out
    }

    /// ½x̂ᵀ(Pm ⊗ Iₙ)x̂; zero for the static generator.
    pub fn storage(&self, x: &[f64]) -> f64 {
        self.weighted(x, false)
    }

    /// ½x̂ᵀ(Qm ⊗ Iₙ)x̂.
    pub fn dissipation(&self, x: &[f64]) -> f64 {
        self.weighted(x, true)
    }

    fn weighted(&self, x: &[f64], dissipation: bool) -> f64 {
        match self.generator.storage_weights() {
            None => 0.0,
            Some((p, q)) => {
                let w = if dissipation { &q } else { &p };
                if self.preconditioner.is_none() {
                    0.5 * block_quad_form(w, x, self.dim())
                } else {
                    0.5 * block_quad_form(w, &self.normalized_state(x), self.dim())
                }
            }
        }
    }
}

/// Views into a packed state vector.
pub struct StateView<'a> {
    pub x: &'a [f64],
    pub v: &'a [f64],
    pub theta: &'a [f64],
    pub i_d: f64,
    pub i_psi: f64,
    pub i_q: f64,
}

pub fn unpack<'a>(cfg: &FlowConfig, y: &'a [f64]) -> StateView<'a> {
    let (m, n) = (cfg.order(), cfg.dim());
    let (x, rest) = y.split_at(m * n);
    let (v, rest) = rest.split_at(n);
    let (theta, rest) = rest.split_at(n);
    StateView {
        x,
        v,
        theta,
        i_d: rest[0],
        i_psi: rest[1],
        i_q: rest[2],
    }
}

struct Scratch {
    g: Vec<f64>,
    gf: Vec<f64>,
    gpsi: Vec<f64>,
    u: Vec<f64>,
    y: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    fn new(cfg: &FlowConfig) -> Self {
        let n = cfg.dim();
        Self {
            g: vec![0.0; n],
            gf: vec![0.0; n],
            gpsi: vec![0.0; n],
            u: vec![0.0; n],
            y: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// Time derivative of the packed state.
pub fn rhs(cfg: &FlowConfig, t: f64, state: &[f64], out: &mut [f64]) {
    let mut s = Scratch::new(cfg);
    rhs_with(cfg, &mut s, t, state, out);
}

fn rhs_with(cfg: &FlowConfig, s: &mut Scratch, t: f64, state: &[f64], out: &mut [f64]) {
    let (m, n) = (cfg.order(), cfg.dim());
    let st = unpack(cfg, state);
    let gam = cfg.schedules.gamma.eval(t);
    let alpha = cfg.schedules.alpha.eval(t).value;
    cfg.objective.gradient_into(st.theta, &mut s.gf);
    let (_, psi_dt) = cfg.schedules.psi.eval_into(st.v, t, &mut s.gpsi);
    for k in 0..n {
        s.g[k] = s.gf[k] + s.gpsi[k];
    }
    let (dx, rest) = out.split_at_mut(m * n);
    let (dv, rest) = rest.split_at_mut(n);
    let (dtheta, acc) = rest.split_at_mut(n);

    // u = −αMg
    apply(cfg.m(), &s.g, &mut s.tmp);
    for k in 0..n {
        s.u[k] = -alpha * s.tmp[k];
    }
    let supply_or_diss = match &cfg.generator {
        GeneratorModel::Static => {
            s.y.copy_from_slice(&s.u);
            // ∫α²‖g‖², the supplied energy
            alpha * alpha * dot(&s.g, &s.g)
        }
        GeneratorModel::Dynamic(g) => {
            g.state_derivative(st.x, &s.u, dx);
            g.output(st.x, &mut s.y);
            cfg.dissipation(st.x)
        }
        GeneratorModel::Marginal { p } => {
            dx.copy_from_slice(&s.u);
            for k in 0..n {
                s.y[k] = p * st.x[k];
            }
            0.0
        }
    };
    // v̇ = αM⁻¹y
    apply(cfg.m_inv(), &s.y, &mut s.tmp);
    let inv_g = 1.0 / gam.value;
    for k in 0..n {
        dv[k] = alpha * s.tmp[k];
        dtheta[k] = -gam.d1 * inv_g * inv_g * st.v[k] + inv_g * dv[k];
    }
    acc[0] = gam.d1 * bregman_with_gradient(cfg.objective.as_ref(), &cfg.anchor, st.theta, &s.gf);
    acc[1] = psi_dt;
    acc[2] = supply_or_diss;
}

/// Static-generator velocities (θ̇, v̇) at (θ, v, t).
pub fn rhs_m0(cfg: &FlowConfig, t: f64, theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    assert!(
        matches!(cfg.generator, GeneratorModel::Static),
        "rhs_m0 needs the static generator"
    );
    let n = cfg.dim();
    let mut state = Vec::with_capacity(cfg.state_len());
    state.extend_from_slice(v);
    state.extend_from_slice(theta);
    state.extend([0.0; 3]);
    let mut out = vec![0.0; state.len()];
    rhs(cfg, t, &state, &mut out);
    (out[n..2 * n].to_vec(), out[..n].to_vec())
}

/// θ̈ of the scalar-generator second-order form at (θ, θ̇, t); ∇ψ is taken
/// at v = γθ̃.
pub fn rhs_m1_closed_form(cfg: &FlowConfig, t: f64, theta: &[f64], theta_dot: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    let mut s = Scratch::new(cfg);
    closed_form_accel(cfg, &mut s, t, theta, theta_dot, &mut out);
    out
}

fn closed_form_accel(
    cfg: &FlowConfig,
    s: &mut Scratch,
    t: f64,
    theta: &[f64],
    theta_dot: &[f64],
    out: &mut [f64],
) -> (f64, f64, f64) {
    let (a0, p) = cfg
        .generator
        .scalar_parts()
        .expect("closed form needs a scalar generator");
    let n = cfg.dim();
    let gam = cfg.schedules.gamma.eval(t);
    let al = cfg.schedules.alpha.eval(t);
    for k in 0..n {
        s.tmp[k] = gam.value * (theta[k] - cfg.anchor[k]);
    }
    cfg.objective.gradient_into(theta, &mut s.gf);
    let (_, psi_dt) = cfg.schedules.psi.eval_into(&s.tmp, t, &mut s.gpsi);
    let ar = al.d1 / al.value;
    let c1 = 2.0 * gam.d1 / gam.value + a0 - ar;
    let c0 = gam.d2 / gam.value + (a0 - ar) * gam.d1 / gam.value;
    let cg = p * al.value * al.value / gam.value;
    for k in 0..n {
        let tilde = theta[k] - cfg.anchor[k];
        out[k] = -(c1 * theta_dot[k] + c0 * tilde + cg * (s.gf[k] + s.gpsi[k]));
    }
    let d = gam.d1 * bregman_with_gradient(cfg.objective.as_ref(), &cfg.anchor, theta, &s.gf);
    (d, psi_dt, gam.d1)
}

/// θ̇₀ consistent with x₀: v̇₀ = α₀P x̂₀ = γ̇₀θ̃₀ + γ₀θ̇₀.
pub fn consistent_theta_dot0(cfg: &FlowConfig) -> Result<Vec<f64>, FlowError> {
    let (_, p) = cfg
        .generator
        .scalar_parts()
        .ok_or_else(|| FlowError::BadConfig("second-order form needs m = 1".into()))?;
    let t0 = cfg.schedules.t0;
    let gam = cfg.schedules.gamma.eval(t0);
    let alpha = cfg.schedules.alpha.eval(t0).value;
    let xhat = cfg.normalized_state(&cfg.x0);
    Ok((0..cfg.dim())
        .map(|k| (alpha * p * xhat[k] - gam.d1 * (cfg.theta0[k] - cfg.anchor[k])) / gam.value)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegrationPath {
    FirstOrder,
    SecondOrder,
    Nesterov,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub i_d: f64,
    pub i_psi: f64,
    pub i_q: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Trajectory {
    pub path: IntegrationPath,
    pub samples: Vec<FlowSample>,
    pub stats: Stats,
}

impl Trajectory {
    pub fn last(&self) -> &FlowSample {
        self.samples
            .last()
            .expect("trajectories hold at least one sample")
    }
}

/// Integrates the first-order system.
pub fn integrate(cfg: &FlowConfig) -> Result<Trajectory, FlowError> {
    let mut s = Scratch::new(cfg);
    let sol = ode::integrate(
        |t, y, dy| rhs_with(cfg, &mut s, t, y, dy),
        &cfg.output_times,
        &cfg.initial_state(),
        &cfg.method,
    )?;
    let samples = sol
        .t
        .iter()
        .zip(&sol.y)
        .map(|(&t, y)| {
            let st = unpack(cfg, y);
            FlowSample {
                t,
                x: st.x.to_vec(),
                v: st.v.to_vec(),
                theta: st.theta.to_vec(),
                i_d: st.i_d,
                i_psi: st.i_psi,
                i_q: st.i_q,
            }
        })
        .collect();
    Ok(Trajectory {
        path: IntegrationPath::FirstOrder,
        samples,
        stats: sol.stats,
    })
}

/// Integrates the scalar-generator second-order form in (θ, θ̇), starting
/// from the θ̇₀ consistent with x₀. Samples carry the reconstructed
/// x = M·(γ̇θ̃ + γθ̇)/(αP) and v = γθ̃.
pub fn integrate_closed_form_m1(cfg: &FlowConfig) -> Result<Trajectory, FlowError> {
    let (_, p) = cfg
        .generator
        .scalar_parts()
        .ok_or_else(|| FlowError::BadConfig("second-order form needs m = 1".into()))?;
    let q = cfg
        .generator
        .storage_weights()
        .map(|(_, q)| q[(0, 0)])
        .unwrap_or(0.0);
    let n = cfg.dim();
    let mut y0 = cfg.theta0.clone();
    y0.extend(consistent_theta_dot0(cfg)?);
    y0.extend([0.0; 3]);
    let mut s = Scratch::new(cfg);
    let sol = ode::integrate(
        |t, y, dy| {
            let (theta, rest) = y.split_at(n);
            let theta_dot = &rest[..n];
            let (dtheta, rest) = dy.split_at_mut(n);
            dtheta.copy_from_slice(theta_dot);
            let (d, psi_dt, _) =
                closed_form_accel(cfg, &mut s, t, theta, theta_dot, &mut rest[..n]);
            let xhat = reconstruct_xhat(cfg, p, t, theta, theta_dot);
            rest[n] = d;
            rest[n + 1] = psi_dt;
            rest[n + 2] = 0.5 * q * dot(&xhat, &xhat);
        },
        &cfg.output_times,
        &y0,
        &cfg.method,
    )?;
    Ok(second_order_samples(
        cfg,
        p,
        IntegrationPath::SecondOrder,
        sol,
    ))
}

fn reconstruct_xhat(
    cfg: &FlowConfig,
    p: f64,
    t: f64,
    theta: &[f64],
    theta_dot: &[f64],
) -> Vec<f64> {
    let gam = cfg.schedules.gamma.eval(t);
    let alpha = cfg.schedules.alpha.eval(t).value;
    (0..cfg.dim())
        .map(|k| (gam.d1 * (theta[k] - cfg.anchor[k]) + gam.value * theta_dot[k]) / (alpha * p))
        .collect()
}

fn second_order_samples(
    cfg: &FlowConfig,
    p: f64,
    path: IntegrationPath,
    sol: ode::Solution,
) -> Trajectory {
    let n = cfg.dim();
    let samples = sol
        .t
        .iter()
        .zip(&sol.y)
        .map(|(&t, y)| {
            let theta = &y[..n];
            let theta_dot = &y[n..2 * n];
            let xhat = reconstruct_xhat(cfg, p, t, theta, theta_dot);
            let mut x = vec![0.0; n];
            apply(cfg.m(), &xhat, &mut x);
            let g = cfg.schedules.gamma.eval(t).value;
            FlowSample {
                t,
                x,
                v: theta
                    .iter()
                    .zip(&cfg.anchor)
                    .map(|(a, c)| g * (a - c))
                    .collect(),
                theta: theta.to_vec(),
                i_d: y[2 * n],
                i_psi: y[2 * n + 1],
                i_q: y[2 * n + 2],
            }
        })
        .collect();
    Trajectory {
        path,
        samples,
        stats: sol.stats,
    }
}

/// (P, k) when the configuration is the Nesterov setup: marginal generator
/// with weight P, γ = Pk²t², α = kt, ψ = 0.
pub fn nesterov_parameters(cfg: &FlowConfig) -> Option<(f64, f64)> {
    let GeneratorModel::Marginal { p } = cfg.generator else {
        return None;
    };
    let AlphaSchedule::Linear {
        slope: k,
        intercept,
    } = cfg.schedules.alpha
    else {
        return None;
    };
    let GammaSchedule::Polynomial { scale, power } = cfg.schedules.gamma else {
        return None;
    };
    let matches = intercept == 0.0
        && power == 2.0
        && ((scale - p * k * k).abs() <= 1e-14 * scale.abs())
        && cfg.schedules.psi.is_zero();
    matches.then_some((p, k))
}

/// Integrates θ̈ + (3/t)θ̇ + ∇f(θ) = 0 directly. Needs the Nesterov setup.
pub fn integrate_nesterov(cfg: &FlowConfig) -> Result<Trajectory, FlowError> {
    let (p, k) = nesterov_parameters(cfg).ok_or_else(|| {
        FlowError::BadConfig(
            "direct path needs the marginal generator with γ = Pk²t², α = kt and ψ = 0".into(),
        )
    })?;
    if cfg.schedules.t0 <= 0.0 {
        return Err(FlowError::BadConfig("direct path needs t₀ > 0".into()));
    }
    let n = cfg.dim();
    let mut y0 = cfg.theta0.clone();
    y0.extend(consistent_theta_dot0(cfg)?);
    y0.extend([0.0; 3]);
    let mut gf = vec![0.0; n];
    let sol = ode::integrate(
        |t, y, dy| {
            let (theta, rest) = y.split_at(n);
            let theta_dot = &rest[..n];
            cfg.objective.gradient_into(theta, &mut gf);
            let (dtheta, rest) = dy.split_at_mut(n);
            dtheta.copy_from_slice(theta_dot);
            for j in 0..n {
                rest[j] = -3.0 / t * theta_dot[j] - gf[j];
            }
            let gamma_dot = 2.0 * p * k * k * t;
            rest[n] =
                gamma_dot * bregman_with_gradient(cfg.objective.as_ref(), &cfg.anchor, theta, &gf);
            rest[n + 1] = 0.0;
            rest[n + 2] = 0.0;
        },
        &cfg.output_times,
        &y0,
        &cfg.method,
    )?;
    Ok(second_order_samples(cfg, p, IntegrationPath::Nesterov, sol))
}

/// max over samples of ‖v − γ(θ − θ_c)‖∞ / (1 + ‖v‖∞).
pub fn coordinate_identity_error(cfg: &FlowConfig, traj: &Trajectory) -> f64 {
    traj.samples
        .iter()
        .map(|s| {
            let g = cfg.schedules.gamma.eval(s.t).value;
            let vmax = s.v.iter().fold(0.0f64, |a, b| a.max(b.abs()));
            let err =
                s.v.iter()
                    .zip(s.theta.iter().zip(&cfg.anchor))
                    .map(|(v, (th, c))| (v - g * (th - c)).abs())
                    .fold(0.0, f64::max);
            err / (1.0 + vmax)
        })
        .fold(0.0, f64::max)
}

/// max over common samples of ‖θ_a − θ_b‖∞.
pub fn max_theta_deviation(a: &Trajectory, b: &Trajectory) -> f64 {
    a.samples
        .iter()
        .zip(&b.samples)
        .map(|(sa, sb)| {
            sa.theta
                .iter()
                .zip(&sb.theta)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{synthesize, GeneratorSpec};
    use crate::objectives::{Constant, Quadratic};
    use crate::schedules::{PsiRegularizer, RSchedule};

    fn quad(n: usize, center: f64) -> Arc<dyn Objective> {
        let h = if n == 2 {
            Mat::diag(&[1.0, 10.0])
        } else {
            Mat::identity(n)
        };
        Arc::new(Quadratic::new(h, vec![center; n], 0.0).unwrap())
    }

    fn scalar_gen(a0: f64, q: f64, n: usize) -> GeneratorModel {
        let spec = GeneratorSpec::new(n, vec![a0], Mat::diag(&[q]), None).unwrap();
        GeneratorModel::Dynamic(synthesize(&spec).unwrap())
    }

    fn frozen(t0: f64, tf: f64) -> ScheduleSet {
        ScheduleSet::new(
            GammaSchedule::Constant { value: 1.0 },
            AlphaSchedule::Constant { value: 1.0 },
            PsiRegularizer::Zero,
            t0,
            tf,
        )
        .unwrap()
    }

    fn nesterov_cfg(n: usize) -> FlowConfig {
        let s = ScheduleSet::new(
            GammaSchedule::Polynomial {
                scale: 1.0,
                power: 2.0,
            },
            AlphaSchedule::Linear {
                slope: 1.0,
                intercept: 0.0,
            },
            PsiRegularizer::Zero,
            1.0,
            10.0,
        )
        .unwrap();
        let obj = quad(n, 0.0);
        FlowConfig::new(GeneratorModel::Marginal { p: 1.0 }, s, obj, vec![1.0; n])
            .unwrap()
            .with_anchor(AnchorMode::KnownMinimizer)
            .unwrap()
    }

    #[test]
    fn rhs_hand_evaluation() {
        // ∇f(0) = −θ⋆ = −(0.5)
        let cfg = FlowConfig::new(
            scalar_gen(1.0, 2.0, 1),
            frozen(0.0, 1.0),
            quad(1, 0.5),
            vec![0.0],
        )
        .unwrap()
        .with_x0(vec![1.0])
        .unwrap();
        let y = cfg.initial_state();
        let mut dy = vec![0.0; y.len()];
        rhs(&cfg, 0.0, &y, &mut dy);
        let grad0 = -0.5;
        assert!((dy[0] - (-1.0 - grad0)).abs() <= 1e-14);
        assert!((dy[1] - 1.0).abs() <= 1e-14);
        assert!((dy[2] - 1.0).abs() <= 1e-14);
        // I_Q rate = ½·Q·x² = 1
        assert!((dy[5] - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn equilibrium_only_moves_theta() {
        let s = ScheduleSet::new(
            GammaSchedule::ConstantPlusPower {
                base: 1.0,
                scale: 1.0,
                power: 2.0,
            },
            AlphaSchedule::Constant { value: 1.0 },
            PsiRegularizer::Zero,
            0.0,
            5.0,
        )
        .unwrap();
        let obj: Arc<dyn Objective> = Arc::new(Constant::new(2, 1.0));
        let cfg = FlowConfig::new(scalar_gen(1.0, 2.0, 2), s, obj, vec![1.0, -1.0])
            .unwrap()
            .with_anchor(AnchorMode::Explicit(vec![0.0, 0.0]))
            .unwrap();
        let mut y = cfg.initial_state();
        // v = (3, −4) off the identity to exercise the −γ̇γ⁻²v term
        y[2] = 3.0;
        y[3] = -4.0;
        let mut dy = vec![0.0; y.len()];
        let t = 1.0;
        rhs(&cfg, t, &y, &mut dy);
        let (gam, gdot) = (2.0, 2.0);
        assert_eq!(&dy[..4], &[0.0; 4]);
        assert!((dy[4] + gdot / (gam * gam) * 3.0).abs() <= 1e-15);
        assert!((dy[5] - gdot / (gam * gam) * 4.0).abs() <= 1e-15);
        assert_eq!(&dy[6..], &[0.0; 3]);
    }

    #[test]
    fn constant_objective_stays_put() {
        let s = ScheduleSet::new(
            GammaSchedule::Polynomial {
                scale: 1.0,
                power: 2.0,
            },
            AlphaSchedule::Linear {
                slope: 1.0,
                intercept: 0.0,
            },
            PsiRegularizer::Zero,
            1.0,
            10.0,
        )
        .unwrap();
        let obj: Arc<dyn Objective> = Arc::new(Constant::new(2, 3.0));
        let cfg = FlowConfig::new(scalar_gen(1.0, 2.0, 2), s, obj, vec![0.3, -0.7]).unwrap();
        let tr = integrate(&cfg).unwrap();
        for smp in &tr.samples {
            assert_eq!(smp.theta, vec![0.3, -0.7]);
        }
    }

    #[test]
    fn gradient_flow_rhs_exact() {
        let s = ScheduleSet::new(
            GammaSchedule::Constant { value: 4.0 },
            AlphaSchedule::Constant { value: 2.0 },
            PsiRegularizer::Zero,
            0.0,
            1.0,
        )
        .unwrap();
        let obj = quad(2, 0.5);
        let cfg = FlowConfig::new(GeneratorModel::Static, s, obj.clone(), vec![1.0, 2.0]).unwrap();
        let theta = [0.25, -1.5];
        let v = cfg.v0();
        let (dtheta, _) = rhs_m0(&cfg, 0.3, &theta, &v);
        let g = obj.gradient(&theta);
        for k in 0..2 {
            assert!((dtheta[k] + g[k]).abs() <= 1e-14);
        }
    }

    #[test]
    fn static_decay_toward_anchor() {
        // ∇f = 0, γ = 1 + t: θ̇ = −(γ̇/γ)θ̃ gives θ̃(t) = θ̃₀/(1 + t)
        let s = ScheduleSet::new(
            GammaSchedule::ConstantPlusPower {
                base: 1.0,
                scale: 1.0,
                power: 1.0,
            },
            AlphaSchedule::Constant { value: 1.0 },
            PsiRegularizer::Zero,
            0.0,
            4.0,
        )
        .unwrap();
        let obj: Arc<dyn Objective> = Arc::new(Constant::new(1, 0.0));
        let cfg = FlowConfig::new(GeneratorModel::Static, s, obj, vec![2.0])
            .unwrap()
            .with_anchor(AnchorMode::Explicit(vec![0.0]))
            .unwrap();
        let (dtheta, dv) = rhs_m0(&cfg, 0.0, &[2.0], &cfg.v0());
        assert_eq!(dv, vec![0.0]);
        assert!((dtheta[0] + 2.0).abs() < 1e-15);
        let tr = integrate(&cfg).unwrap();
        for smp in &tr.samples {
            assert!((smp.theta[0] - 2.0 / (1.0 + smp.t)).abs() < 1e-9);
        }
    }

    #[test]
    fn static_quadratic_matches_linear_ode() {
        // n=1, f = ½(θ−1)², γ = 1 + t, α = 1, θ_c = 1, ψ = 0:
        // θ̃ obeys θ̃' = −(1/(1+t))θ̃ − θ̃/(1+t) = −2θ̃/(1+t)  ⇒ θ̃ = θ̃₀/(1+t)².
        let s = ScheduleSet::new(
            GammaSchedule::ConstantPlusPower {
                base: 1.0,
                scale: 1.0,
                power: 1.0,
            },
            AlphaSchedule::Constant { value: 1.0 },
            PsiRegularizer::Zero,
            0.0,
            5.0,
        )
        .unwrap();
        let cfg = FlowConfig::new(GeneratorModel::Static, s, quad(1, 1.0), vec![3.0])
            .unwrap()
            .with_anchor(AnchorMode::KnownMinimizer)
            .unwrap();
        let tr = integrate(&cfg).unwrap();
        for smp in &tr.samples {
            let exact = 1.0 + 2.0 / (1.0 + smp.t).powi(2);
            assert!((smp.theta[0] - exact).abs() <= 1e-8, "t={}", smp.t);
        }
    }

    #[test]
    fn nesterov_gap_below_threshold() {
        let cfg = nesterov_cfg(1);
        let tr = integrate_nesterov(&cfg).unwrap();
        let last = tr.last();
        let gap = cfg.objective.value(&last.theta);
        assert!(gap < 1e-3, "gap {gap}");
    }

    #[test]
    fn closed_form_with_nesterov_schedules_is_nesterov_ode() {
        let cfg = nesterov_cfg(2);
        let theta = [0.4, -0.2];
        let theta_dot = [0.1, 0.3];
        let t = 2.5;
        let acc = rhs_m1_closed_form(&cfg, t, &theta, &theta_dot);
        let g = cfg.objective.gradient(&theta);
        for k in 0..2 {
            let direct = -3.0 / t * theta_dot[k] - g[k];
            assert!((acc[k] - direct).abs() <= 1e-14);
        }
    }

    #[test]
    fn marginal_first_order_matches_direct() {
        let cfg = nesterov_cfg(2);
        let a = integrate(&cfg).unwrap();
        let b = integrate_nesterov(&cfg).unwrap();
        assert!(max_theta_deviation(&a, &b) < 1e-6);
    }

    #[test]
    fn first_order_matches_closed_form() {
        let s = ScheduleSet::new(
            GammaSchedule::ConstantPlusPower {
                base: 1.0,
                scale: 1.0,
                power: 2.0,
            },
            AlphaSchedule::Linear {
                slope: 1.0,
                intercept: 0.0,
            },
            PsiRegularizer::norm_quadratic(
                RSchedule::ExpDecay {
                    initial: 1.0,
                    rate: 0.1,
                },
                0.0,
                GammaSchedule::ConstantPlusPower {
                    base: 1.0,
                    scale: 1.0,
                    power: 2.0,
                },
            ),
            1.0,
            10.0,
        )
        .unwrap();
        let cfg = FlowConfig::new(scalar_gen(1.0, 2.0, 2), s, quad(2, 0.5), vec![2.0, -1.0])
            .unwrap()
            .with_anchor(AnchorMode::KnownMinimizer)
            .unwrap()
            .with_x0(vec![0.3, -0.2])
            .unwrap();
        let a = integrate(&cfg).unwrap();
        let b = integrate_closed_form_m1(&cfg).unwrap();
        assert!(max_theta_deviation(&a, &b) <= 1e-6);
        let la = a.last();
        let lb = b.last();
        assert!((la.i_d - lb.i_d).abs() <= 1e-6 * (1.0 + la.i_d.abs()));
        assert!((la.i_q - lb.i_q).abs() <= 1e-6 * (1.0 + la.i_q.abs()));
    }

    #[test]
    fn preconditioner_leaves_theta_unchanged() {
        let s = ScheduleSet::new(
            GammaSchedule::ConstantPlusPower {
                base: 1.0,
                scale: 1.0,
                power: 2.0,
            },
            AlphaSchedule::Constant { value: 1.0 },
            PsiRegularizer::Zero,
            0.0,
            5.0,
        )
        .unwrap();
        let base =
            FlowConfig::new(scalar_gen(1.0, 2.0, 2), s, quad(2, 0.5), vec![2.0, -1.0]).unwrap();
        let pre = base
            .clone()
            .with_preconditioner(Mat::diag(&[2.0, 3.0]))
            .unwrap();
        let a = integrate(&base).unwrap();
        let b = integrate(&pre).unwrap();
        assert!(max_theta_deviation(&a, &b) <= 1e-8);
        // supply-side quantities agree in normalized coordinates
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            let va = base.storage(&sa.x);
            let vb = pre.storage(&sb.x);
            assert!((va - vb).abs() <= 1e-8 * (1.0 + va));
        }
        assert!((a.last().i_q - b.last().i_q).abs() <= 1e-8);
    }

    #[test]
    fn preconditioned_supply_rate_invariant() {
        let s = frozen(0.0, 1.0);
        let base = FlowConfig::new(scalar_gen(1.0, 2.0, 2), s, quad(2, 0.5), vec![2.0, -1.0])
            .unwrap()
            .with_x0(vec![0.4, 0.1])
            .unwrap();
        let m = Mat::diag(&[2.0, 2.0]);
        let pre = base.clone().with_preconditioner(m.clone()).unwrap();
        // raw state of the preconditioned run is M·x
        let pre = pre.with_x0(vec![0.8, 0.2]).unwrap();
        let supply = |cfg: &FlowConfig| {
            let y = cfg.initial_state();
            let mut dy = vec![0.0; y.len()];
            rhs(cfg, 0.0, &y, &mut dy);
            // ⟨ŷ, û⟩ = dV/dt + ½x̂ᵀQx̂ in normalized coordinates
            let h = 1e-6;
            let x1: Vec<f64> = y[..2]
                .iter()
                .zip(&dy[..2])
                .map(|(a, b)| a + h * b)
                .collect();
            let x0: Vec<f64> = y[..2]
                .iter()
                .zip(&dy[..2])
                .map(|(a, b)| a - h * b)
                .collect();
            (cfg.storage(&x1) - cfg.storage(&x0)) / (2.0 * h) + cfg.dissipation(&y[..2])
        };
        assert!((supply(&base) - supply(&pre)).abs() <= 1e-8);
    }

    #[test]
    fn coordinate_identity_holds() {
        let cfg = nesterov_cfg(2);
        let tr = integrate(&cfg).unwrap();
        assert!(coordinate_identity_error(&cfg, &tr) <= 1e-6);
    }

    #[test]
    fn rk4_theta_error_is_fourth_order() {
        let cfg = nesterov_cfg(2)
            .with_output_times(linspace(1.0, 10.0, 10))
            .unwrap();
        let reference = integrate(&cfg.clone().with_method(Method::dopri5(1e-12, 1e-14))).unwrap();
        let err = |h: f64| {
            let tr = integrate(&cfg.clone().with_method(Method::Rk4 { step: h })).unwrap();
            max_theta_deviation(&tr, &reference)
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        let r1 = e1 / e2;
        let r2 = e2 / e3;
        assert!((12.0..20.0).contains(&r1), "{e1} {e2} {e3}");
        assert!((12.0..20.0).contains(&r2), "{r2}");
    }

    #[test]
    fn bad_dimensions_rejected() {
        let e = FlowConfig::new(
            scalar_gen(1.0, 2.0, 2),
            frozen(0.0, 1.0),
            quad(2, 0.0),
            vec![1.0],
        );
        assert!(matches!(e, Err(FlowError::BadConfig(_))));
        let cfg = FlowConfig::new(
            scalar_gen(1.0, 2.0, 2),
            frozen(0.0, 1.0),
            quad(2, 0.0),
            vec![1.0, 1.0],
        )
        .unwrap();
        assert!(cfg.clone().with_x0(vec![0.0]).is_err());
        assert!(cfg.with_preconditioner(Mat::zeros(2, 2)).is_err());
    }
}
