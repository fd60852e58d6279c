//! Explicit integrators for y' = f(t, y) sampled at prescribed output times.
//!
//! Two methods are available: classical fixed-step RK4 and the Dormand–Prince
//! 5(4) embedded pair with per-component mixed error control. Steps never
//! cross an output time, so samples are exact integrator states rather than
//! interpolants.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OdeError {
    #[error("StepSizeUnderflow: step {h:e} at t = {t} fell below {min_step:e}")]
    StepSizeUnderflow { t: f64, h: f64, min_step: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("output times must be finite and strictly increasing")]
    BadOutputTimes,
    #[error("step budget of {0} exhausted")]
    MaxStepsExceeded(usize),
    #[error("invalid integrator settings: {0}")]
    BadSettings(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Method {
    /// Classical RK4. Each output interval is split into the fewest equal
    /// substeps no longer than `step`.
    Rk4 { step: f64 },
    /// Dormand–Prince 5(4) with error ≤ atol + rtol·|y| per component.
    Dopri5 {
        rtol: f64,
        atol: f64,
        #[serde(default = "default_min_step")]
        min_step: f64,
        #[serde(default = "default_max_steps")]
        max_steps: usize,
    },
}

fn default_min_step() -> f64 {
    1e-12
}

fn default_max_steps() -> usize {
    10_000_000
}

impl Method {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Method::Dopri5 {
            rtol,
            atol,
            min_step: default_min_step(),
            max_steps: default_max_steps(),
        }
    }

    fn validate(&self) -> Result<(), OdeError> {
        match *self {
            Method::Rk4 { step } if !(step > 0.0 && step.is_finite()) => Err(
                OdeError::BadSettings(format!("RK4 step must be positive, got {step}")),
            ),
            Method::Dopri5 {
                rtol,
                atol,
                min_step,
                ..
            } if !(rtol > 0.0 && atol >= 0.0 && min_step > 0.0) => Err(OdeError::BadSettings(
                format!("need rtol > 0, atol ≥ 0, min_step > 0; got {rtol}, {atol}, {min_step}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Stats {
    pub rhs_evals: usize,
    pub accepted: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub t: Vec<f64>,
    /// `y[k]` is the state at `t[k]`.
    pub y: Vec<Vec<f64>>,
    pub stats: Stats,
}

/// Integrates from `t_out[0]` with state `y0`, recording the state at every
/// entry of `t_out`.
pub fn integrate<F>(
    mut f: F,
    t_out: &[f64],
    y0: &[f64],
    method: &Method,
) -> Result<Solution, OdeError>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    method.validate()?;
    if t_out.is_empty()
        || t_out.iter().any(|t| !t.is_finite())
        || t_out.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(OdeError::BadOutputTimes);
    }
    let mut stats = Stats::default();
    let mut ys = Vec::with_capacity(t_out.len());
    ys.push(y0.to_vec());
    let mut y = y0.to_vec();
    match *method {
        Method::Rk4 { step } => {
            let mut ws = Rk4Work::new(y.len());
            for w in t_out.windows(2) {
                let span = w[1] - w[0];
                let nsub = ((span / step) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
                let h = span / nsub as f64;
                for k in 0..nsub {
                    let t = w[0] + k as f64 * h;
                    rk4_step(&mut f, t, h, &mut y, &mut ws);
                    stats.rhs_evals += 4;
                    stats.accepted += 1;
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(OdeError::NonFinite { t: w[1] });
                }
                ys.push(y.clone());
            }
        }
        Method::Dopri5 {
            rtol,
            atol,
            min_step,
            max_steps,
        } => {
            let mut d = Dopri::new(y.len(), rtol, atol, min_step, max_steps);
            d.init(
                &mut f,
                t_out[0],
                &y,
                t_out[t_out.len() - 1] - t_out[0],
                &mut stats,
            );
            let mut t = t_out[0];
            for &target in &t_out[1..] {
                d.advance_to(&mut f, &mut t, &mut y, target, &mut stats)?;
                ys.push(y.clone());
            }
        }
    }
    Ok(Solution {
        t: t_out.to_vec(),
        y: ys,
        stats,
    })
}

/// `n` points spaced evenly over [t0, tf], endpoints included.
pub fn linspace(t0: f64, tf: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "linspace needs at least two points");
    let h = (tf - t0) / (n - 1) as f64;
    (0..n)
        .map(|k| if k == n - 1 { tf } else { t0 + k as f64 * h })
        .collect()
}

struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

fn rk4_step<F>(f: &mut F, t: f64, h: f64, y: &mut [f64], w: &mut Rk4Work)
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    f(t, y, &mut w.k1);
    for i in 0..n {
        w.tmp[i] = y[i] + 0.5 * h * w.k1[i];
    }
    f(t + 0.5 * h, &w.tmp, &mut w.k2);
    for i in 0..n {
        w.tmp[i] = y[i] + 0.5 * h * w.k2[i];
    }
    f(t + 0.5 * h, &w.tmp, &mut w.k3);
    for i in 0..n {
        w.tmp[i] = y[i] + h * w.k3[i];
    }
    f(t + h, &w.tmp, &mut w.k4);
    for i in 0..n {
        y[i] += h / 6.0 * (w.k1[i] + 2.0 * w.k2[i] + 2.0 * w.k3[i] + w.k4[i]);
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// fifth-order weights minus embedded fourth-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

struct Dopri {
    rtol: f64,
    atol: f64,
    min_step: f64,
    max_steps: usize,
    h: f64,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    ynew: Vec<f64>,
}

impl Dopri {
    fn new(n: usize, rtol: f64, atol: f64, min_step: f64, max_steps: usize) -> Self {
        Self {
            rtol,
            atol,
            min_step,
            max_steps,
            h: 0.0,
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            ynew: vec![0.0; n],
        }
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.atol + self.rtol * a.abs().max(b.abs())
    }

    /// Starting step from the usual two-probe estimate; leaves f(t0, y0) in k[0].
    fn init<F>(&mut self, f: &mut F, t0: f64, y: &[f64], span: f64, stats: &mut Stats)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        f(t0, y, &mut self.k[0]);
        stats.rhs_evals += 1;
        if n == 0 {
            self.h = span;
            return;
        }
        let rms =
            |v: &mut dyn Iterator<Item = f64>| (v.map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        let d0 = rms(&mut (0..n).map(|i| y[i] / self.scale(y[i], y[i])));
        let d1 = rms(&mut (0..n).map(|i| self.k[0][i] / self.scale(y[i], y[i])));
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let h0 = h0.min(span);
        for i in 0..n {
            self.tmp[i] = y[i] + h0 * self.k[0][i];
        }
        f(t0 + h0, &self.tmp, &mut self.k[1]);
        stats.rhs_evals += 1;
        let d2 =
            rms(&mut (0..n).map(|i| (self.k[1][i] - self.k[0][i]) / self.scale(y[i], y[i]))) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        self.h = (100.0 * h0).min(h1).min(span);
    }

    fn advance_to<F>(
        &mut self,
        f: &mut F,
        t: &mut f64,
        y: &mut [f64],
        target: f64,
        stats: &mut Stats,
    ) -> Result<(), OdeError>
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        while *t < target {
            if stats.accepted + stats.rejected >= self.max_steps {
                return Err(OdeError::MaxStepsExceeded(self.max_steps));
            }
            let remaining = target - *t;
            // a step landing within a hair of the target is stretched onto it
            let (h, hits) = if self.h >= remaining * (1.0 - 1e-12) {
                (remaining, true)
            } else {
                (self.h, false)
            };
            if h < self.min_step && !hits {
                return Err(OdeError::StepSizeUnderflow {
                    t: *t,
                    h,
                    min_step: self.min_step,
                });
            }
            self.stages(f, *t, h, y);
            stats.rhs_evals += 6;
            let mut err2 = 0.0;
            for i in 0..n {
                let e = h
                    * (E1 * self.k[0][i]
                        + E3 * self.k[2][i]
                        + E4 * self.k[3][i]
                        + E5 * self.k[4][i]
                        + E6 * self.k[5][i]
                        + E7 * self.k[6][i]);
                let s = self.scale(y[i], self.ynew[i]);
                err2 += (e / s) * (e / s);
            }
            let err = if n == 0 {
                0.0
            } else {
                (err2 / n as f64).sqrt()
            };
            if !err.is_finite() {
                stats.rejected += 1;
                self.h = h * FAC_MIN;
                if self.h < self.min_step {
                    return Err(OdeError::NonFinite { t: *t });
                }
                continue;
            }
            let fac = if err == 0.0 {
                FAC_MAX
            } else {
                (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
            };
            if err <= 1.0 {
                stats.accepted += 1;
                *t = if hits { target } else { *t + h };
                y.copy_from_slice(&self.ynew);
                let (first, rest) = self.k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                // a step shortened to hit the target does not shrink the next one
                let base = if hits { self.h.max(h) } else { h };
                self.h = base * fac;
            } else {
                stats.rejected += 1;
                self.h = h * fac.min(1.0);
                if self.h < self.min_step {
                    return Err(OdeError::StepSizeUnderflow {
                        t: *t,
                        h: self.h,
                        min_step: self.min_step,
                    });
                }
            }
        }
        Ok(())
    }

    fn stages<F>(&mut self, f: &mut F, t: f64, h: f64, y: &[f64])
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;
        let tmp = &mut self.tmp;
        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        f(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] =
                y[i] + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + h, tmp, k6);
        for i in 0..n {
            self.ynew[i] =
                y[i] + h * (B1 * k1[i] + B3 * k3[i] + B4 * k4[i] + B5 * k5[i] + B6 * k6[i]);
        }
        f(t + h, &self.ynew, k7);
    }
}
