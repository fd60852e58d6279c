//! Convex objectives, the Bregman divergence, and a gradient checker.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::Arc;

use crate::linalg::{cholesky, dot, norm_inf_vec, solve_linear, Mat};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("BadParams: {0}")]
    BadParams(String),
}

/// Known solution metadata: θ⋆ and f⋆.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimizer {
    pub theta: Vec<f64>,
    pub value: f64,
}

pub trait Objective: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> f64;
    fn gradient_into(&self, theta: &[f64], out: &mut [f64]);

    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.gradient_into(theta, &mut g);
        g
    }

    fn minimizer(&self) -> Option<&Minimizer> {
        None
    }
}

/// D_f(p, q) = f(p) − f(q) − ⟨∇f(q), p − q⟩.
pub fn bregman(obj: &dyn Objective, p: &[f64], q: &[f64]) -> f64 {
    let g = obj.gradient(q);
    let lin: f64 = g
        .iter()
        .zip(p.iter().zip(q))
        .map(|(gi, (pi, qi))| gi * (pi - qi))
        .sum();
    obj.value(p) - obj.value(q) - lin
}

/// Same as [`bregman`] with a caller-supplied ∇f(q), for hot loops.
pub fn bregman_with_gradient(obj: &dyn Objective, p: &[f64], q: &[f64], grad_q: &[f64]) -> f64 {
    let lin: f64 = grad_q
        .iter()
        .zip(p.iter().zip(q))
        .map(|(gi, (pi, qi))| gi * (pi - qi))
        .sum();
    obj.value(p) - obj.value(q) - lin
}

/// Max coordinate error between ∇f(θ) and central differences with step
/// `h`, relative to max(‖fd‖∞, 1e-6).
pub fn grad_check(obj: &dyn Objective, theta: &[f64], h: f64) -> f64 {
    debug_assert!((1e-7..=1e-3).contains(&h), "step {h} outside [1e-7, 1e-3]");
    let g = obj.gradient(theta);
    let mut probe = theta.to_vec();
    let fd: Vec<f64> = (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + h;
            let hi = obj.value(&probe);
            probe[i] = theta[i] - h;
            let lo = obj.value(&probe);
            probe[i] = theta[i];
            (hi - lo) / (2.0 * h)
        })
        .collect();
    let scale = norm_inf_vec(&fd).max(1e-6);
    g.iter()
        .zip(&fd)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

/// Smallest D_f(p, q) over `pairs` random pairs drawn from [−radius, radius]ⁿ.
pub fn convexity_spot_check(obj: &dyn Objective, pairs: usize, radius: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = obj.dim();
    let mut worst = f64::INFINITY;
    for _ in 0..pairs {
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..radius)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..radius)).collect();
        worst = worst.min(bregman(obj, &p, &q));
    }
    worst
}

/// f(θ) = ½(θ − θ⋆)ᵀH(θ − θ⋆) + f⋆ with H SPD.
#[derive(Debug, Clone)]
pub struct Quadratic {
    hessian: Mat,
    minimizer: Minimizer,
}

impl Quadratic {
    pub fn new(hessian: Mat, center: Vec<f64>, f_min: f64) -> Result<Self, ObjectiveError> {
        if !hessian.is_square() || hessian.rows() != center.len() {
            return Err(ObjectiveError::BadParams(format!(
                "H is {}x{} but θ⋆ has length {}",
                hessian.rows(),
                hessian.cols(),
                center.len()
            )));
        }
        cholesky(&hessian).map_err(|e| ObjectiveError::BadParams(format!("H must be SPD: {e}")))?;
        Ok(Self {
            hessian,
            minimizer: Minimizer {
                theta: center,
                value: f_min,
            },
        })
    }

    pub fn hessian(&self) -> &Mat {
        &self.hessian
    }
}

impl Objective for Quadratic {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.minimizer.theta.len()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let d: Vec<f64> = theta
            .iter()
            .zip(&self.minimizer.theta)
            .map(|(a, b)| a - b)
            .collect();
        0.5 * self.hessian.quad_form(&d) + self.minimizer.value
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        let n = self.dim();
        for (i, o) in out.iter_mut().enumerate().take(n) {
            let row = self.hessian.row(i);
            *o = (0..n)
                .map(|j| row[j] * (theta[j] - self.minimizer.theta[j]))
                .sum();
        }
    }

    fn minimizer(&self) -> Option<&Minimizer> {
        Some(&self.minimizer)
    }
}

/// f(θ) = ½‖Aθ − b‖².
#[derive(Debug, Clone)]
pub struct LeastSquares {
    a: Mat,
    b: Vec<f64>,
    minimizer: Option<Minimizer>,
}

impl LeastSquares {
    pub fn new(a: Mat, b: Vec<f64>) -> Result<Self, ObjectiveError> {
        if a.rows() != b.len() || a.cols() == 0 {
            return Err(ObjectiveError::BadParams(format!(
                "A is {}x{} but b has length {}",
                a.rows(),
                a.cols(),
                b.len()
            )));
        }
        let mut obj = Self {
            a,
            b,
            minimizer: None,
        };
        // normal equations; rank deficiency leaves the minimizer unknown
        let at = obj.a.transpose();
        let ata = at.matmul(&obj.a).expect("AᵀA dimensions agree");
        if cholesky(&ata).is_ok() {
            let atb = at.matvec(&obj.b).expect("Aᵀb dimensions agree");
            if let Ok(theta) = solve_linear(&ata, &atb) {
                let value = obj.value(&theta);
                obj.minimizer = Some(Minimizer { theta, value });
            }
        }
        Ok(obj)
    }

    fn residual(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.a.rows())
            .map(|i| dot(self.a.row(i), theta) - self.b[i])
            .collect()
    }
}

impl Objective for LeastSquares {
    fn name(&self) -> &str {
        "least-squares"
    }

    fn dim(&self) -> usize {
        self.a.cols()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let r = self.residual(theta);
        0.5 * dot(&r, &r)
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        let r = self.residual(theta);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, ri) in r.iter().enumerate() {
            for (o, aij) in out.iter_mut().zip(self.a.row(i)) {
                *o += aij * ri;
            }
        }
    }

    fn minimizer(&self) -> Option<&Minimizer> {
        self.minimizer.as_ref()
    }
}

/// f(θ) = log Σᵢ exp(aᵢᵀθ + bᵢ). No closed-form minimizer.
#[derive(Debug, Clone)]
pub struct LogSumExp {
    a: Mat,
    b: Vec<f64>,
}

impl LogSumExp {
    pub fn new(a: Mat, b: Vec<f64>) -> Result<Self, ObjectiveError> {
        if a.rows() != b.len() || a.rows() == 0 || a.cols() == 0 {
            return Err(ObjectiveError::BadParams(format!(
                "A is {}x{} but b has length {}",
                a.rows(),
                a.cols(),
                b.len()
            )));
        }
        Ok(Self { a, b })
    }

    fn logits(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.a.rows())
            .map(|i| dot(self.a.row(i), theta) + self.b[i])
            .collect()
    }

    /// Softmax weights of the planes at θ.
    pub fn weights(&self, theta: &[f64]) -> Vec<f64> {
        let z = self.logits(theta);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|zi| (zi - zmax).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|ei| ei / s).collect()
    }
}

impl Objective for LogSumExp {
    fn name(&self) -> &str {
        "log-sum-exp"
    }

    fn dim(&self) -> usize {
        self.a.cols()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let z = self.logits(theta);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        zmax + z.iter().map(|zi| (zi - zmax).exp()).sum::<f64>().ln()
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        let w = self.weights(theta);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, wi) in w.iter().enumerate() {
            for (o, aij) in out.iter_mut().zip(self.a.row(i)) {
                *o += wi * aij;
            }
        }
    }
}

/// f ≡ c. Every point is a minimizer; θ⋆ is reported as the origin.
#[derive(Debug, Clone)]
pub struct Constant {
    minimizer: Minimizer,
}

impl Constant {
    pub fn new(dim: usize, value: f64) -> Self {
        Self {
            minimizer: Minimizer {
                theta: vec![0.0; dim],
                value,
            },
        }
    }
}

impl Objective for Constant {
    fn name(&self) -> &str {
        "constant"
    }

    fn dim(&self) -> usize {
        self.minimizer.theta.len()
    }

    fn value(&self, _theta: &[f64]) -> f64 {
        self.minimizer.value
    }

    fn gradient_into(&self, _theta: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }

    fn minimizer(&self) -> Option<&Minimizer> {
        Some(&self.minimizer)
    }
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Objective from closures.
pub struct FnObjective {
    name: String,
    dim: usize,
    value: Box<ValueFn>,
    gradient: Box<GradFn>,
    minimizer: Option<Minimizer>,
}

impl FnObjective {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            value: Box::new(value),
            gradient: Box::new(gradient),
            minimizer: None,
        }
    }

    pub fn with_minimizer(mut self, minimizer: Minimizer) -> Self {
        self.minimizer = Some(minimizer);
        self
    }
}

impl fmt::Debug for FnObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnObjective")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

impl Objective for FnObjective {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, theta: &[f64]) -> f64 {
        (self.value)(theta)
    }

    fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        (self.gradient)(theta, out)
    }

    fn minimizer(&self) -> Option<&Minimizer> {
        self.minimizer.as_ref()
    }
}

/// Parameters of the built-in objective families.
#[derive(Debug, Clone)]
pub enum BuiltinParams {
    Quadratic {
        hessian: Mat,
        minimizer: Vec<f64>,
        f_min: f64,
    },
    LeastSquares {
        a: Mat,
        b: Vec<f64>,
    },
    LogSumExp {
        a: Mat,
        b: Vec<f64>,
    },
    Constant {
        dim: usize,
        value: f64,
    },
}

pub fn builtin(params: BuiltinParams) -> Result<Arc<dyn Objective>, ObjectiveError> {
    Ok(match params {
        BuiltinParams::Quadratic {
            hessian,
            minimizer,
            f_min,
        } => Arc::new(Quadratic::new(hessian, minimizer, f_min)?),
        BuiltinParams::LeastSquares { a, b } => Arc::new(LeastSquares::new(a, b)?),
        BuiltinParams::LogSumExp { a, b } => Arc::new(LogSumExp::new(a, b)?),
        BuiltinParams::Constant { dim, value } => {
            if dim == 0 {
                return Err(ObjectiveError::BadParams(
                    "dimension must be at least 1".into(),
                ));
            }
            Arc::new(Constant::new(dim, value))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quad() -> Quadratic {
        let h = Mat::from_rows(&[[3.0, 1.0], [1.0, 2.0]]).unwrap();
        Quadratic::new(h, vec![1.0, -2.0], 0.5).unwrap()
    }

    fn lse() -> LogSumExp {
        let a = Mat::from_rows(&[[1.0, 0.5], [-1.0, 1.0], [0.2, -1.5]]).unwrap();
        LogSumExp::new(a, vec![0.1, -0.3, 0.7]).unwrap()
    }

    #[test]
    fn quadratic_identity_example() {
        let q = Quadratic::new(Mat::identity(2), vec![1.0, 1.0], 0.0).unwrap();
        assert_eq!(q.value(&[0.0, 0.0]), 1.0);
        assert_eq!(q.gradient(&[0.0, 0.0]), vec![-1.0, -1.0]);
    }

    #[test]
    fn quadratic_rejects_indefinite_hessian() {
        let h = Mat::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        let err = builtin(BuiltinParams::Quadratic {
            hessian: h,
            minimizer: vec![0.0, 0.0],
            f_min: 0.0,
        })
        .unwrap_err();
        assert!(matches!(err, ObjectiveError::BadParams(_)));
    }

    #[test]
    fn least_squares_exact_solution() {
        let a = Mat::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap();
        let ls = LeastSquares::new(a, vec![1.0, 2.0]).unwrap();
        let m = ls.minimizer().unwrap();
        assert!((m.theta[0] - 1.0).abs() < 1e-15 && (m.theta[1] - 1.0).abs() < 1e-15);
        assert!(m.value.abs() < 1e-30);
    }

    #[test]
    fn least_squares_rank_deficient_has_no_minimizer() {
        let a = Mat::from_rows(&[[1.0, 1.0], [2.0, 2.0]]).unwrap();
        let ls = LeastSquares::new(a, vec![1.0, 2.0]).unwrap();
        assert!(ls.minimizer().is_none());
    }

    #[test]
    fn lse_softmax_weights() {
        let f = lse();
        assert!(f.minimizer().is_none());
        let theta = [0.3, -0.8];
        let w = f.weights(&theta);
        assert!(w.iter().all(|wi| *wi > 0.0 && *wi < 1.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        // gradient is the weight-averaged plane normal
        let g = f.gradient(&theta);
        let expected0 = w[0] * 1.0 + w[1] * -1.0 + w[2] * 0.2;
        assert!((g[0] - expected0).abs() < 1e-15);
    }

    #[test]
    fn bregman_self_is_zero() {
        let f = lse();
        assert_eq!(bregman(&f, &[0.2, 0.4], &[0.2, 0.4]), 0.0);
    }

    #[test]
    fn grad_check_examples() {
        assert!(grad_check(&quad(), &[0.3, 0.9], 1e-5) <= 1e-8);
        assert!(grad_check(&lse(), &[0.3, 0.9], 1e-5) <= 1e-6);
        let q = quad();
        let wrong = FnObjective::new("doubled", 2, move |t| q.value(t), {
            let q = quad();
            move |t, out| {
                q.gradient_into(t, out);
                out.iter_mut().for_each(|o| *o *= 2.0);
            }
        });
        let err = grad_check(&wrong, &[0.3, 0.9], 1e-5);
        assert!((err - 1.0).abs() < 1e-6, "{err}");
    }

    #[test]
    fn minimizer_gradients_vanish() {
        let q = quad();
        let m = q.minimizer().unwrap();
        assert!(norm_inf_vec(&q.gradient(&m.theta)) <= 1e-8);
        let a = Mat::from_rows(&[[1.0, 2.0], [0.5, -1.0], [3.0, 0.1]]).unwrap();
        let ls = LeastSquares::new(a, vec![1.0, 0.0, -2.0]).unwrap();
        let m = ls.minimizer().unwrap();
        assert!(norm_inf_vec(&ls.gradient(&m.theta)) <= 1e-8);
    }

    #[test]
    fn convexity_spot_checks() {
        let objs: Vec<Box<dyn Objective>> = vec![
            Box::new(quad()),
            Box::new(lse()),
            Box::new(
                LeastSquares::new(
                    Mat::from_rows(&[[1.0, 2.0], [0.5, -1.0]]).unwrap(),
                    vec![1.0, 0.0],
                )
                .unwrap(),
            ),
            Box::new(Constant::new(2, 3.0)),
        ];
        for o in &objs {
            assert!(
                convexity_spot_check(o.as_ref(), 1000, 3.0, 7) >= -1e-10,
                "{}",
                o.name()
            );
        }
    }

    proptest! {
        #[test]
        fn quadratic_bregman_is_half_hessian_norm(p in proptest::collection::vec(-4.0f64..4.0, 2),
                                                  q in proptest::collection::vec(-4.0f64..4.0, 2)) {
            let f = quad();
            let d: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a - b).collect();
            let expected = 0.5 * f.hessian().quad_form(&d);
            prop_assert!((bregman(&f, &p, &q) - expected).abs() <= 1e-12 * (1.0 + expected));
        }

        #[test]
        fn lse_bregman_nonnegative(p in proptest::collection::vec(-4.0f64..4.0, 2),
                                   q in proptest::collection::vec(-4.0f64..4.0, 2)) {
            prop_assert!(bregman(&lse(), &p, &q) >= -1e-12);
        }

        #[test]
        fn builtin_gradients_consistent(theta in proptest::collection::vec(-2.0f64..2.0, 2)) {
            prop_assert!(grad_check(&quad(), &theta, 1e-5) <= 1e-6);
            prop_assert!(grad_check(&lse(), &theta, 1e-5) <= 1e-6);
        }
    }
}
