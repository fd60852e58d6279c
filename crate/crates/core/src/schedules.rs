//! Time schedules γ(t), α(t) and the regularizer ψ(v, t).
//!
//! Every schedule carries closed-form first and second derivatives. A
//! [`ScheduleSet`] bundles the three with the run interval and refuses to run
//! unless the standing assumptions hold on a validation grid: γ > 0, γ̇ > 0,
//! α ≠ 0, ψ ≥ ψ̲ and ∂ψ/∂t ≤ 0.

use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::policy::NumericPolicy;

/// Central-difference step used by the derivative self-checks.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScheduleError {
    #[error("AssumptionViolated: {quantity} = {value:e} at t = {t}")]
    AssumptionViolated {
        quantity: &'static str,
        t: f64,
        value: f64,
    },
    #[error("time {t} is outside the validated interval [{t0}, {tf}]")]
    OutOfInterval { t: f64, t0: f64, tf: f64 },
    #[error("invalid interval [{t0}, {tf}]")]
    BadInterval { t0: f64, tf: f64 },
    #[error("validation grid needs at least 100 points, got {0}")]
    GridTooCoarse(usize),
}

/// A value with its first two time derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Jet {
    pub fn new(value: f64, d1: f64, d2: f64) -> Self {
        Self { value, d1, d2 }
    }
}

/// c·t^p with derivatives; zero coefficients short-circuit so t = 0 never
/// produces 0·∞.
fn power_jet(c: f64, p: f64, t: f64) -> Jet {
    let value = c * t.powf(p);
    let k1 = c * p;
    let d1 = if k1 == 0.0 { 0.0 } else { k1 * t.powf(p - 1.0) };
    let k2 = k1 * (p - 1.0);
    let d2 = if k2 == 0.0 { 0.0 } else { k2 * t.powf(p - 2.0) };
    Jet::new(value, d1, d2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaSchedule {
    /// γ = scale·t^power
    Polynomial { scale: f64, power: f64 },
    /// γ = scale·e^{rate·t}
    Exponential { scale: f64, rate: f64 },
    /// γ = base + scale·t^power
    ConstantPlusPower { base: f64, scale: f64, power: f64 },
    /// γ = value. Only admissible for the static (gradient-flow) generator
    /// reduction; validation flags it as not strictly increasing.
    Constant { value: f64 },
}

impl GammaSchedule {
    pub fn eval(&self, t: f64) -> Jet {
        match *self {
            GammaSchedule::Polynomial { scale, power } => power_jet(scale, power, t),
            GammaSchedule::Exponential { scale, rate } => {
                let v = scale * (rate * t).exp();
                Jet::new(v, rate * v, rate * rate * v)
            }
            GammaSchedule::ConstantPlusPower { base, scale, power } => {
                let j = power_jet(scale, power, t);
                Jet::new(base + j.value, j.d1, j.d2)
            }
            GammaSchedule::Constant { value } => Jet::new(value, 0.0, 0.0),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, GammaSchedule::Constant { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AlphaSchedule {
    Constant {
        value: f64,
    },
    /// α = intercept + slope·t
    Linear {
        slope: f64,
        #[serde(default)]
        intercept: f64,
    },
    /// α = scale·t^power
    Power {
        scale: f64,
        power: f64,
    },
}

impl AlphaSchedule {
    pub fn eval(&self, t: f64) -> Jet {
        match *self {
            AlphaSchedule::Constant { value } => Jet::new(value, 0.0, 0.0),
            AlphaSchedule::Linear { slope, intercept } => {
                Jet::new(intercept + slope * t, slope, 0.0)
            }
            AlphaSchedule::Power { scale, power } => power_jet(scale, power, t),
        }
    }
}

/// Weight R(t) of the norm-quadratic regularizer; both kinds have Ṙ ≤ 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RSchedule {
    Constant {
        value: f64,
    },
    /// R = initial·e^{−rate·t}, rate ≥ 0
    ExpDecay {
        initial: f64,
        rate: f64,
    },
}

impl RSchedule {
    /// (R, Ṙ)
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match *self {
            RSchedule::Constant { value } => (value, 0.0),
            RSchedule::ExpDecay { initial, rate } => {
                let r = initial * (-rate * t).exp();
                (r, -rate * r)
            }
        }
    }
}

/// ψ(v, t). The norm-quadratic kind is ½(R(t)/γ(t)²)‖v‖² + δ, which equals
/// ½R(t)‖θ − θ_c‖² + δ in the optimization variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PsiRegularizer {
    Zero,
    NormQuadratic {
        r: RSchedule,
        delta: f64,
        gamma: GammaSchedule,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsiValue {
    pub value: f64,
    pub grad: Vec<f64>,
    pub dt: f64,
}

impl PsiRegularizer {
    pub fn norm_quadratic(r: RSchedule, delta: f64, gamma: GammaSchedule) -> Self {
        PsiRegularizer::NormQuadratic { r, delta, gamma }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PsiRegularizer::Zero)
    }

    /// Constant lower bound ψ̲.
    pub fn lower_bound(&self) -> f64 {
        match self {
            PsiRegularizer::Zero => 0.0,
            PsiRegularizer::NormQuadratic { delta, .. } => *delta,
        }
    }

    /// R(t)/γ(t)², the weight of ½‖v‖².
    pub fn v_weight(&self, t: f64) -> f64 {
        match self {
            PsiRegularizer::Zero => 0.0,
            PsiRegularizer::NormQuadratic { r, gamma, .. } => {
                let g = gamma.eval(t).value;
                r.eval(t).0 / (g * g)
            }
        }
    }

    /// Coefficient of ‖v‖² in ∂ψ/∂t: ½(Ṙγ⁻² − 2Rγ̇γ⁻³).
    pub fn time_derivative_weight(&self, t: f64) -> f64 {
        match self {
            PsiRegularizer::Zero => 0.0,
            PsiRegularizer::NormQuadratic { r, gamma, .. } => {
                let g = gamma.eval(t);
                let (rv, rd) = r.eval(t);
                0.5 * (rd / (g.value * g.value) - 2.0 * rv * g.d1 / g.value.powi(3))
            }
        }
    }

    /// Returns (ψ, ∂ψ/∂t) and writes ∇_vψ into `grad`.
    pub fn eval_into(&self, v: &[f64], t: f64, grad: &mut [f64]) -> (f64, f64) {
        match self {
            PsiRegularizer::Zero => {
                grad.iter_mut().for_each(|g| *g = 0.0);
                (0.0, 0.0)
            }
            PsiRegularizer::NormQuadratic { delta, .. } => {
                let w = self.v_weight(t);
                let vv = dot(v, v);
                for (g, vi) in grad.iter_mut().zip(v) {
                    *g = w * vi;
                }
                (0.5 * w * vv + delta, self.time_derivative_weight(t) * vv)
            }
        }
    }

    pub fn eval(&self, v: &[f64], t: f64) -> PsiValue {
        let mut grad = vec![0.0; v.len()];
        let (value, dt) = self.eval_into(v, t, &mut grad);
        PsiValue { value, grad, dt }
    }
}

/// Max relative disagreement between analytic (d1, d2) and central
/// differences of (value, d1) at `t`.
pub fn derivative_error(f: impl Fn(f64) -> Jet, t: f64, h: f64) -> f64 {
    let j = f(t);
    let lo = f(t - h);
    let hi = f(t + h);
    let fd1 = (hi.value - lo.value) / (2.0 * h);
    let fd2 = (hi.d1 - lo.d1) / (2.0 * h);
    let e1 = (j.d1 - fd1).abs()
        / j.d1
            .abs()
            .max(fd1.abs())
            .max(1e-3 * j.value.abs())
            .max(f64::MIN_POSITIVE);
    let e2 = (j.d2 - fd2).abs()
        / j.d2
            .abs()
            .max(fd2.abs())
            .max(1e-3 * j.d1.abs())
            .max(f64::MIN_POSITIVE);
    e1.max(e2)
}

/// Location and value of an extreme over the validation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Extreme {
    pub value: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub gridpoints: usize,
    pub min_gamma: Extreme,
    pub min_gamma_dot: Extreme,
    pub min_abs_alpha: Extreme,
    /// max over the grid of ∂ψ/∂t for unit ‖v‖
    pub max_psi_dt: Extreme,
    pub min_r: Option<Extreme>,
    pub max_derivative_error: f64,
    /// False only for the constant-γ reduction.
    pub gamma_strictly_increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleSet {
    pub gamma: GammaSchedule,
    pub alpha: AlphaSchedule,
    pub psi: PsiRegularizer,
    pub t0: f64,
    pub tf: f64,
}

impl ScheduleSet {
    pub fn new(
        gamma: GammaSchedule,
        alpha: AlphaSchedule,
        psi: PsiRegularizer,
        t0: f64,
        tf: f64,
    ) -> Result<Self, ScheduleError> {
        if !(t0.is_finite() && tf.is_finite() && tf > t0) {
            return Err(ScheduleError::BadInterval { t0, tf });
        }
        Ok(Self {
            gamma,
            alpha,
            psi,
            t0,
            tf,
        })
    }

    fn check_interval(&self, t: f64) -> Result<(), ScheduleError> {
        if t < self.t0 || t > self.tf || t.is_nan() {
            Err(ScheduleError::OutOfInterval {
                t,
                t0: self.t0,
                tf: self.tf,
            })
        } else {
            Ok(())
        }
    }

    /// (γ, γ̇, γ̈) at `t`, refusing times outside [t₀, t_f].
    pub fn gamma_at(&self, t: f64) -> Result<Jet, ScheduleError> {
        self.check_interval(t)?;
        Ok(self.gamma.eval(t))
    }

    pub fn alpha_at(&self, t: f64) -> Result<Jet, ScheduleError> {
        self.check_interval(t)?;
        Ok(self.alpha.eval(t))
    }

    pub fn psi_at(&self, v: &[f64], t: f64) -> Result<PsiValue, ScheduleError> {
        self.check_interval(t)?;
        Ok(self.psi.eval(v, t))
    }

    pub fn validate(
        &self,
        gridpoints: usize,
        policy: &NumericPolicy,
    ) -> Result<ValidationReport, ScheduleError> {
        if gridpoints < 100 {
            return Err(ScheduleError::GridTooCoarse(gridpoints));
        }
        let span = self.tf - self.t0;
        let grid = (0..gridpoints).map(|i| self.t0 + span * i as f64 / (gridpoints - 1) as f64);

        let mut min_gamma = Extreme {
            value: f64::INFINITY,
            t: self.t0,
        };
        let mut min_gamma_dot = min_gamma;
        let mut min_abs_alpha = min_gamma;
        let mut min_r: Option<Extreme> = None;
        let mut max_psi_dt = Extreme {
            value: f64::NEG_INFINITY,
            t: self.t0,
        };
        let mut max_derivative_error = 0.0_f64;

        let psi_r = match &self.psi {
            PsiRegularizer::NormQuadratic { r, gamma, .. } => {
                if gamma != &self.gamma {
                    return Err(ScheduleError::AssumptionViolated {
                        quantity: "psi gamma handle (differs from the run's gamma)",
                        t: self.t0,
                        value: f64::NAN,
                    });
                }
                Some(r)
            }
            PsiRegularizer::Zero => None,
        };

        for t in grid {
            let g = self.gamma.eval(t);
            let a = self.alpha.eval(t);
            let finite = [g.value, g.d1, g.d2, a.value, a.d1, a.d2];
            if finite.iter().any(|v| !v.is_finite()) {
                return Err(ScheduleError::AssumptionViolated {
                    quantity: "schedule value (non-finite)",
                    t,
                    value: f64::NAN,
                });
            }
            if g.value < min_gamma.value {
                min_gamma = Extreme { value: g.value, t };
            }
            if g.d1 < min_gamma_dot.value {
                min_gamma_dot = Extreme { value: g.d1, t };
            }
            if a.value.abs() < min_abs_alpha.value {
                min_abs_alpha = Extreme {
                    value: a.value.abs(),
                    t,
                };
            }
            let pdt = self.psi.time_derivative_weight(t);
            if pdt > max_psi_dt.value {
                max_psi_dt = Extreme { value: pdt, t };
            }
            if let Some(r) = psi_r {
                let rv = r.eval(t).0;
                if min_r.map_or(true, |m| rv < m.value) {
                    min_r = Some(Extreme { value: rv, t });
                }
            }
            if t - FD_STEP >= self.t0 && t + FD_STEP <= self.tf {
                max_derivative_error = max_derivative_error
                    .max(derivative_error(|s| self.gamma.eval(s), t, FD_STEP))
                    .max(derivative_error(|s| self.alpha.eval(s), t, FD_STEP));
            }
        }

        if !(min_gamma.value > 0.0) {
            return Err(ScheduleError::AssumptionViolated {
                quantity: "gamma",
                t: min_gamma.t,
                value: min_gamma.value,
            });
        }
        let strictly = min_gamma_dot.value > 0.0;
        if !strictly && !(self.gamma.is_constant() && min_gamma_dot.value == 0.0) {
            return Err(ScheduleError::AssumptionViolated {
                quantity: "gamma_dot",
                t: min_gamma_dot.t,
                value: min_gamma_dot.value,
            });
        }
        if min_abs_alpha.value < policy.alpha_min {
            return Err(ScheduleError::AssumptionViolated {
                quantity: "|alpha|",
                t: min_abs_alpha.t,
                value: min_abs_alpha.value,
            });
        }
        if let Some(r) = min_r {
            if !(r.value > 0.0) {
                return Err(ScheduleError::AssumptionViolated {
                    quantity: "R",
                    t: r.t,
                    value: r.value,
                });
            }
        }
        if max_psi_dt.value > policy.psi_time_derivative_max {
            return Err(ScheduleError::AssumptionViolated {
                quantity: "dpsi/dt",
                t: max_psi_dt.t,
                value: max_psi_dt.value,
            });
        }
        if max_derivative_error > policy.schedule_derivative_rel {
            return Err(ScheduleError::AssumptionViolated {
                quantity: "schedule derivative consistency",
                t: self.t0,
                value: max_derivative_error,
            });
        }
        Ok(ValidationReport {
            gridpoints,
            min_gamma,
            min_gamma_dot,
            min_abs_alpha,
            max_psi_dt,
            min_r,
            max_derivative_error,
            gamma_strictly_increasing: strictly,
        })
    }
}
