//! Passive generator synthesis.
//!
//! The generator is the m-th order linear system driving the optimizer. It is
//! stored as its m×m companion factor; the full state matrix is `Am ⊗ Iₙ` and
//! is applied blockwise on an m×n state (row i holds the i-th derivative of
//! the generator signal). With no feedthrough the KYP conditions reduce to
//! `AᵀP + PA = −Q` and `C = BᵀP`, so synthesis is one Lyapunov solve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::linalg::{self, cholesky, dot, inverse, is_hurwitz, solve_lyapunov, LinalgError, Mat};
use crate::policy::NumericPolicy;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeneratorError {
    #[error("invalid generator spec: {0}")]
    BadSpec(String),
    #[error("NotHurwitz: companion matrix with coefficients {coeffs:?} is not Hurwitz")]
    NotHurwitz { coeffs: Vec<f64> },
    #[error("weight matrix Q is not symmetric positive definite: {0}")]
    WeightNotPositiveDefinite(LinalgError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Companion factor `(Am, Bm)` for `w⁽ᵐ⁾ + a_{m−1}w⁽ᵐ⁻¹⁾ + … + a₀w = u`.
pub fn companion(coeffs: &[f64]) -> (Mat, Mat) {
    let m = coeffs.len();
    let mut a = Mat::zeros(m, m);
    for i in 0..m.saturating_sub(1) {
        a[(i, i + 1)] = 1.0;
    }
    if m > 0 {
        for (j, &c) in coeffs.iter().enumerate() {
            a[(m - 1, j)] = -c;
        }
    }
    let mut b = Mat::zeros(m, 1);
    if m > 0 {
        b[(m - 1, 0)] = 1.0;
    }
    (a, b)
}

/// Monic polynomial coefficients (a₀, …, a_{m−1}) of Π(s + rᵢ).
pub fn coeffs_from_roots(roots: &[f64]) -> Vec<f64> {
    // poly[k] is the coefficient of s^k
    let mut poly = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; poly.len() + 1];
        for (k, &c) in poly.iter().enumerate() {
            next[k] += r * c;
            next[k + 1] += c;
        }
        poly = next;
    }
    poly.truncate(roots.len());
    poly
}

#[derive(Debug, Clone)]
pub struct GeneratorSpec {
    order: usize,
    dim: usize,
    coeffs: Vec<f64>,
    weight: Mat,
    preconditioner: Option<Mat>,
}

impl GeneratorSpec {
    pub fn new(
        dim: usize,
        coeffs: Vec<f64>,
        weight: Mat,
        preconditioner: Option<Mat>,
    ) -> Result<Self, GeneratorError> {
        let order = coeffs.len();
        if order == 0 {
            return Err(GeneratorError::BadSpec(
                "generator order must be at least 1".into(),
            ));
        }
        if dim == 0 {
            return Err(GeneratorError::BadSpec(
                "problem dimension must be at least 1".into(),
            ));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(GeneratorError::BadSpec("non-finite coefficient".into()));
        }
        if weight.rows() != order || weight.cols() != order {
            return Err(GeneratorError::BadSpec(format!(
                "Q must be {order}x{order}, got {}x{}",
                weight.rows(),
                weight.cols()
            )));
        }
        cholesky(&weight).map_err(GeneratorError::WeightNotPositiveDefinite)?;
        if let Some(m) = &preconditioner {
            if m.rows() != dim || m.cols() != dim {
                return Err(GeneratorError::BadSpec(format!(
                    "preconditioner must be {dim}x{dim}, got {}x{}",
                    m.rows(),
                    m.cols()
                )));
            }
            inverse(m).map_err(|e| {
                GeneratorError::BadSpec(format!("preconditioner is not invertible: {e}"))
            })?;
        }
        let (a, _) = companion(&coeffs);
        if !is_hurwitz(&a) {
            return Err(GeneratorError::NotHurwitz { coeffs });
        }
        Ok(Self {
            order,
            dim,
            coeffs,
            weight,
            preconditioner,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn weight(&self) -> &Mat {
        &self.weight
    }

    pub fn preconditioner(&self) -> Option<&Mat> {
        self.preconditioner.as_ref()
    }
}

/// Synthesized passive generator in companion-factor form.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorRealization {
    pub coeffs: Vec<f64>,
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub p: Mat,
    pub q: Mat,
    /// KYP factor with `LᵀL = Q`.
    #[serde(skip)]
    pub l: Mat,
    pub dim: usize,
    pub lyapunov_residual: f64,
}

pub fn synthesize(spec: &GeneratorSpec) -> Result<GeneratorRealization, GeneratorError> {
    let (a, b) = companion(&spec.coeffs);
    if !is_hurwitz(&a) {
        return Err(GeneratorError::NotHurwitz {
            coeffs: spec.coeffs.clone(),
        });
    }
    let p = solve_lyapunov(&a, &spec.weight)?;
    cholesky(&p)?;
    let c = b.transpose().matmul(&p)?;
    let chol = cholesky(&spec.weight).map_err(GeneratorError::WeightNotPositiveDefinite)?;
    let lyapunov_residual = linalg::lyapunov_residual(&a, &p, &spec.weight);
    Ok(GeneratorRealization {
        coeffs: spec.coeffs.clone(),
        a,
        b,
        c,
        p,
        q: spec.weight.clone(),
        l: chol.transpose(),
        dim: spec.dim,
        lyapunov_residual,
    })
}

impl GeneratorRealization {
    pub fn order(&self) -> usize {
        self.a.rows()
    }

    /// Lyapunov residual relative to ‖Q‖∞.
    pub fn relative_residual(&self) -> f64 {
        self.lyapunov_residual / self.q.norm_inf()
    }

    /// max|PB − Cᵀ|; zero for every synthesized realization.
    pub fn kyp_mismatch(&self) -> f64 {
        let pb = self.p.matmul(&self.b).expect("P is m×m, B is m×1");
        pb.sub(&self.c.transpose())
            .map(|d| d.max_abs())
            .unwrap_or(f64::INFINITY)
    }

    /// Blockwise `(Am ⊗ Iₙ)x + (Bm ⊗ Iₙ)u` for a general state matrix.
    pub fn state_derivative(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (m, n) = (self.order(), self.dim);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            row.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..m {
                let aij = self.a[(i, j)];
                if aij != 0.0 {
                    for k in 0..n {
                        row[k] += aij * x[j * n + k];
                    }
                }
            }
            let bi = self.b[(i, 0)];
            if bi != 0.0 {
                for k in 0..n {
                    row[k] += bi * u[k];
                }
            }
        }
    }

    /// `y = (Cm ⊗ Iₙ)x`.
    pub fn output(&self, x: &[f64], out: &mut [f64]) {
        let (m, n) = (self.order(), self.dim);
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..m {
            let cj = self.c[(0, j)];
            for k in 0..n {
                out[k] += cj * x[j * n + k];
            }
        }
    }

    /// ½xᵀ(Pm ⊗ Iₙ)x.
    pub fn storage(&self, x: &[f64]) -> f64 {
        0.5 * block_quad_form(&self.p, x, self.dim)
    }

    /// ½xᵀ(Qm ⊗ Iₙ)x.
    pub fn dissipation(&self, x: &[f64]) -> f64 {
        0.5 * block_quad_form(&self.q, x, self.dim)
    }

    /// Full-size (A⊗Iₙ, B⊗Iₙ, C⊗Iₙ, P⊗Iₙ, Q⊗Iₙ); test and verification use only.
    pub fn lifted(&self) -> [Mat; 5] {
        let i = Mat::identity(self.dim);
        [
            linalg::kron(&self.a, &i),
            linalg::kron(&self.b, &i),
            linalg::kron(&self.c, &i),
            linalg::kron(&self.p, &i),
            linalg::kron(&self.q, &i),
        ]
    }
}

/// xᵀ(S ⊗ Iₙ)x with x stored as m rows of length n.
pub fn block_quad_form(s: &Mat, x: &[f64], n: usize) -> f64 {
    let m = s.rows();
    let mut acc = 0.0;
    for i in 0..m {
        let xi = &x[i * n..(i + 1) * n];
        for j in 0..m {
            let sij = s[(i, j)];
            if sij != 0.0 {
                acc += sij * dot(xi, &x[j * n..(j + 1) * n]);
            }
        }
    }
    acc
}

#[derive(Debug, Clone, Serialize)]
pub struct PassivityReport {
    pub samples: usize,
    pub seed: u64,
    /// max |V̇ − (⟨y,u⟩ − ½xᵀQx)|
    pub max_abs_violation: f64,
    /// Same violation divided by the sum of the term magnitudes.
    pub max_rel_violation: f64,
    /// min over samples of uᵀy − V̇, which equals ½‖Lx‖² ≥ 0 for a passive realization.
    pub min_supply_excess: f64,
    pub passed: bool,
}

/// Samples random (x, u) and checks the storage identity
/// `V̇ = ⟨y,u⟩ − ½xᵀQx` with `V = ½xᵀPx`.
pub fn verify_passivity(
    gen: &GeneratorRealization,
    samples: usize,
    seed: u64,
    policy: &NumericPolicy,
) -> PassivityReport {
    let (m, n) = (gen.order(), gen.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; m * n];
    let mut u = vec![0.0; n];
    let mut xdot = vec![0.0; m * n];
    let mut y = vec![0.0; n];
    let mut px = vec![0.0; m * n];
    let mut worst_abs = 0.0_f64;
    let mut worst_rel = 0.0_f64;
    let mut min_excess = f64::INFINITY;
    let mut excess_ok = true;
    for _ in 0..samples {
        x.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        u.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        gen.state_derivative(&x, &u, &mut xdot);
        gen.output(&x, &mut y);
        // (P ⊗ I)x
        for i in 0..m {
            for k in 0..n {
                px[i * n + k] = (0..m).map(|j| gen.p[(i, j)] * x[j * n + k]).sum();
            }
        }
        let vdot = dot(&px, &xdot);
        let supply = dot(&y, &u);
        let diss = gen.dissipation(&x);
        let violation = (vdot - (supply - diss)).abs();
        let scale = vdot.abs() + supply.abs() + diss.abs();
        worst_abs = worst_abs.max(violation);
        if scale > 0.0 {
            worst_rel = worst_rel.max(violation / scale);
        }
        let excess = supply - vdot;
        min_excess = min_excess.min(excess);
        if excess < -1e-12 * scale.max(1.0) {
            excess_ok = false;
        }
    }
    PassivityReport {
        samples,
        seed,
        max_abs_violation: worst_abs,
        max_rel_violation: worst_rel,
        min_supply_excess: min_excess,
        passed: worst_rel <= policy.passivity_rel && excess_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize, coeffs: &[f64], q: Mat) -> GeneratorSpec {
        GeneratorSpec::new(n, coeffs.to_vec(), q, None).unwrap()
    }

    #[test]
    fn companion_patterns() {
        let (a, b) = companion(&[2.0]);
        assert_eq!(a, Mat::from_rows(&[[-2.0]]).unwrap());
        assert_eq!(b, Mat::from_rows(&[[1.0]]).unwrap());

        let (a, b) = companion(&[2.0, 3.0]);
        assert_eq!(a, Mat::from_rows(&[[0.0, 1.0], [-2.0, -3.0]]).unwrap());
        assert_eq!(b, Mat::from_rows(&[[0.0], [1.0]]).unwrap());

        let (a, b) = companion(&[1.0, 2.0, 3.0]);
        let expected =
            Mat::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, -2.0, -3.0]]).unwrap();
        assert_eq!(a, expected);
        assert_eq!(b.as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn coeffs_from_roots_expands_product() {
        assert_eq!(coeffs_from_roots(&[1.0, 2.0]), vec![2.0, 3.0]);
        assert_eq!(coeffs_from_roots(&[1.0, 1.0, 1.0]), vec![1.0, 3.0, 3.0]);
    }

    #[test]
    fn scalar_synthesis_matches_closed_form() {
        let g = synthesize(&spec(1, &[1.0], Mat::diag(&[2.0]))).unwrap();
        assert_eq!(g.p[(0, 0)], 1.0);
        assert_eq!(g.c[(0, 0)], 1.0);
        let g = synthesize(&spec(1, &[5.0], Mat::diag(&[10.0]))).unwrap();
        assert_eq!(g.p[(0, 0)], 1.0);
    }

    #[test]
    fn second_order_synthesis() {
        let g = synthesize(&spec(2, &[1.0, 1.0], Mat::identity(2))).unwrap();
        // independent hand solution of AᵀP + PA = −I for A = [[0,1],[-1,-1]]
        let expected = Mat::from_rows(&[[1.5, 0.5], [0.5, 1.0]]).unwrap();
        assert!(g.p.sub(&expected).unwrap().max_abs() < 1e-14);
        assert_eq!(g.kyp_mismatch(), 0.0);
        assert!(g.relative_residual() <= 1e-10);
        assert_eq!(g.c.as_slice(), g.p.row(1));
    }

    #[test]
    fn not_hurwitz_rejected() {
        let err = GeneratorSpec::new(1, vec![-1.0], Mat::diag(&[1.0]), None).unwrap_err();
        assert!(matches!(err, GeneratorError::NotHurwitz { .. }));
        assert!(err.to_string().contains("NotHurwitz"));
    }

    #[test]
    fn bad_weight_rejected() {
        let q = Mat::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        let err = GeneratorSpec::new(1, vec![1.0, 1.0], q, None).unwrap_err();
        assert!(matches!(err, GeneratorError::WeightNotPositiveDefinite(_)));
    }

    #[test]
    fn singular_preconditioner_rejected() {
        let m = Mat::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        let err = GeneratorSpec::new(2, vec![1.0], Mat::diag(&[1.0]), Some(m)).unwrap_err();
        assert!(matches!(err, GeneratorError::BadSpec(_)));
    }

    #[test]
    fn lifted_lyapunov_matches_kron_of_factor() {
        for n in 1..=3 {
            let q = Mat::from_rows(&[[2.0, 0.5], [0.5, 1.0]]).unwrap();
            let g = synthesize(&spec(n, &[2.0, 3.0], q)).unwrap();
            let [a, _, _, p_lift, q_lift] = g.lifted();
            let p_full = solve_lyapunov(&a, &q_lift).unwrap();
            assert!(p_full.sub(&p_lift).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn blockwise_ops_match_materialized() {
        let g = synthesize(&spec(2, &[2.0, 3.0, 1.5], Mat::identity(3))).unwrap();
        let [a, b, c, p, q] = g.lifted();
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let u = [0.3, -1.1];
        let mut xdot = vec![0.0; 6];
        g.state_derivative(&x, &u, &mut xdot);
        let reference: Vec<f64> = a
            .matvec(&x)
            .unwrap()
            .iter()
            .zip(b.matvec(&u).unwrap())
            .map(|(l, r)| l + r)
            .collect();
        for (l, r) in xdot.iter().zip(&reference) {
            assert!((l - r).abs() < 1e-14);
        }
        let mut y = vec![0.0; 2];
        g.output(&x, &mut y);
        for (l, r) in y.iter().zip(c.matvec(&x).unwrap()) {
            assert!((l - r).abs() < 1e-14);
        }
        assert!((g.storage(&x) - 0.5 * p.quad_form(&x)).abs() < 1e-12);
        assert!((g.dissipation(&x) - 0.5 * q.quad_form(&x)).abs() < 1e-12);
    }

    #[test]
    fn passivity_holds_and_corruption_is_detected() {
        let policy = NumericPolicy::default();
        let g1 = synthesize(&spec(1, &[1.0], Mat::diag(&[2.0]))).unwrap();
        let r = verify_passivity(&g1, 200, 1, &policy);
        assert!(r.passed, "{r:?}");
        assert!(r.max_abs_violation < 1e-14);

        let g2 = synthesize(&spec(3, &[1.0, 1.0], Mat::identity(2))).unwrap();
        let r = verify_passivity(&g2, 1000, 42, &policy);
        assert!(r.passed && r.max_rel_violation <= 1e-10, "{r:?}");

        let mut bad = g2.clone();
        bad.c = bad.c.add(&Mat::from_rows(&[[0.1, 0.1]]).unwrap()).unwrap();
        let r = verify_passivity(&bad, 1000, 42, &policy);
        assert!(!r.passed);
        assert!(r.max_abs_violation > 1e-3, "{r:?}");
    }

    #[test]
    fn supply_excess_equals_kyp_factor_norm() {
        let q = Mat::from_rows(&[[3.0, 1.0], [1.0, 2.0]]).unwrap();
        let g = synthesize(&spec(1, &[2.0, 1.0], q)).unwrap();
        let lt_l = g.l.transpose().matmul(&g.l).unwrap();
        assert!(lt_l.sub(&g.q).unwrap().max_abs() < 1e-14);
        let x = [0.4, -0.9];
        let u = [0.25];
        let mut xdot = [0.0; 2];
        g.state_derivative(&x, &u, &mut xdot);
        let mut y = [0.0];
        g.output(&x, &mut y);
        let vdot = dot(&g.p.matvec(&x).unwrap(), &xdot);
        let lx = g.l.matvec(&x).unwrap();
        assert!((y[0] * u[0] - vdot - 0.5 * dot(&lx, &lx)).abs() < 1e-14);
    }
}
