//! Invariant suites behind `verify`. Every suite is seeded and returns one
//! row per property; a suite fails when any row fails.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use passiflow::flow::{rhs_m0, FlowConfig, GeneratorModel};
use passiflow::generator::{coeffs_from_roots, synthesize, verify_passivity, GeneratorSpec};
use passiflow::linalg::{
    cholesky, inverse, is_hurwitz, kron, lyapunov_residual, norm_inf_vec, solve_linear,
    solve_lyapunov, Mat,
};
use passiflow::objectives::{
    convexity_spot_check, grad_check, LeastSquares, LogSumExp, Objective, Quadratic,
};
use passiflow::policy::NumericPolicy;
use passiflow::schedules::{AlphaSchedule, GammaSchedule, PsiRegularizer, RSchedule, ScheduleSet};

use crate::config::{read_json, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Linalg,
    Generator,
    Schedules,
    Objectives,
    FlowEquivalence,
    Presets,
    All,
}

impl Suite {
    pub fn label(self) -> &'static str {
        match self {
            Suite::Linalg => "linalg",
            Suite::Generator => "generator",
            Suite::Schedules => "schedules",
            Suite::Objectives => "objectives",
            Suite::FlowEquivalence => "flow-equivalence",
            Suite::Presets => "presets",
            Suite::All => "all",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl Row {
    fn bound(suite: &'static str, name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: worst <= tolerance,
            worst,
            tolerance,
            detail: String::new(),
        }
    }

    fn flag(
        suite: &'static str,
        name: impl Into<String>,
        passed: bool,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            suite,
            name: name.into(),
            passed,
            worst: f64::NAN,
            tolerance: f64::NAN,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub jobs: usize,
    /// Directory holding the shipped presets.
    pub presets: PathBuf,
    /// Extra run configuration whose schedules join the schedules suite.
    pub config: Option<PathBuf>,
}

/// Companion spec with real roots in [−3, −0.3] and a random SPD weight.
pub fn random_spec(rng: &mut ChaCha8Rng, m: usize, dim: usize) -> GeneratorSpec {
    let rates: Vec<f64> = (0..m).map(|_| rng.gen_range(0.3..3.0)).collect();
    let coeffs = coeffs_from_roots(&rates);
    let l = Mat::new(m, m, (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("m×m");
    let q = l
        .matmul(&l.transpose())
        .expect("m×m")
        .add(&Mat::identity(m).scale(0.5))
        .expect("m×m");
    GeneratorSpec::new(dim, coeffs, q, None).expect("Hurwitz by construction")
}

pub fn linalg_suite(seed: u64) -> Vec<Row> {
    const S: &str = "linalg";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lyap, mut chol_fail, mut solve_res, mut inv_res) = (0.0f64, 0usize, 0.0f64, 0.0f64);
    for trial in 0..50 {
        let m = 1 + trial % 4;
        let spec = random_spec(&mut rng, m, 1);
        let (a, _) = passiflow::generator::companion(spec.coeffs());
        let p = solve_lyapunov(&a, spec.weight()).expect("Hurwitz");
        lyap = lyap.max(lyapunov_residual(&a, &p, spec.weight()) / spec.weight().norm_inf());
        if cholesky(&p).is_err() {
            chol_fail += 1;
        }
        let dense = Mat::new(m, m, (0..m * m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("m×m")
            .add(&Mat::identity(m).scale(m as f64))
            .expect("m×m");
        let b: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = solve_linear(&dense, &b).expect("diagonally dominant");
        let ax = dense.matvec(&x).expect("m");
        let r: Vec<f64> = ax.iter().zip(&b).map(|(u, v)| u - v).collect();
        solve_res = solve_res.max(norm_inf_vec(&r) / (1.0 + norm_inf_vec(&b)));
        let inv = inverse(&dense).expect("invertible");
        let id = dense
            .matmul(&inv)
            .expect("m×m")
            .sub(&Mat::identity(m))
            .expect("m×m");
        inv_res = inv_res.max(id.max_abs());
    }
    let a = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).expect("2×2");
    let k = kron(&a, &Mat::identity(2));
    let kron_ok = k.rows() == 4 && k[(2, 0)] == 3.0 && k[(3, 1)] == 3.0 && k[(0, 1)] == 0.0;
    let unstable = Mat::from_rows(&[[0.0, 1.0], [1.0, -1.0]]).expect("2×2");
    vec![
        Row::bound(S, "lyapunov-residual", lyap, 1e-10),
        Row::flag(
            S,
            "lyapunov-solution-spd",
            chol_fail == 0,
            format!("{chol_fail} failures"),
        ),
        Row::bound(S, "gepp-residual", solve_res, 1e-12),
        Row::bound(S, "inverse-residual", inv_res, 1e-12),
        Row::flag(S, "kron-layout", kron_ok, ""),
        Row::flag(S, "hurwitz-rejects-unstable", !is_hurwitz(&unstable), ""),
    ]
}

pub fn generator_suite(seed: u64, policy: &NumericPolicy) -> Vec<Row> {
    const S: &str = "generator";
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut res, mut kyp, mut pas, mut chol_fail) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let start = std::time::Instant::now();
    for trial in 0..50 {
        let m = 1 + trial % 4;
        let spec = random_spec(&mut rng, m, 2);
        let g = synthesize(&spec).expect("Hurwitz by construction");
        res = res.max(g.relative_residual());
        kyp = kyp.max(g.kyp_mismatch());
        if cholesky(&g.p).is_err() {
            chol_fail += 1;
        }
        pas = pas.max(
            verify_passivity(&g, 200, seed.wrapping_add(trial as u64), policy).max_rel_violation,
        );
    }
    let elapsed = start.elapsed().as_secs_f64();

    let mut scalar = 0.0f64;
    for _ in 0..20 {
        let a0 = rng.gen_range(0.01..10.0);
        let q = rng.gen_range(0.01..10.0);
        let spec = GeneratorSpec::new(1, vec![a0], Mat::diag(&[q]), None).expect("a₀ > 0");
        let p = synthesize(&spec).expect("a₀ > 0").p[(0, 0)];
        let exact = q / (2.0 * a0);
        scalar = scalar.max((p - exact).abs() / exact);
    }

    let spec = random_spec(&mut rng, 2, 2);
    let mut bad = synthesize(&spec).expect("Hurwitz");
    bad.c[(0, 0)] += 1e-3;
    let caught = !verify_passivity(&bad, 200, seed, policy).passed;
    let rejected = GeneratorSpec::new(1, vec![-1.0], Mat::diag(&[2.0]), None).is_err();

    vec![
        Row::bound(S, "lyapunov-residual-50-specs", res, 1e-10),
        Row::flag(
            S,
            "p-cholesky",
            chol_fail == 0,
            format!("{chol_fail} failures"),
        ),
        Row::bound(S, "pb-equals-ct", kyp, 0.0),
        Row::bound(S, "synthesis-runtime-s", elapsed, 1.0),
        Row::bound(S, "closed-form-p-scalar", scalar, 1e-14),
        Row::bound(S, "passivity-identity", pas, policy.passivity_rel),
        Row::flag(S, "corruption-detected", caught, "C perturbed by 1e-3"),
        Row::flag(S, "rejects-non-hurwitz", rejected, "a0 = -1"),
    ]
}

fn schedule_row(name: &str, set: &ScheduleSet, policy: &NumericPolicy) -> Row {
    match set.validate(200, policy) {
        Ok(r) => {
            let mut row = Row::bound(
                "schedules",
                name,
                r.max_derivative_error,
                policy.schedule_derivative_rel,
            );
            row.detail = format!("min gamma_dot {:.3e}", r.min_gamma_dot.value);
            row
        }
        Err(e) => Row::flag("schedules", name, false, e.to_string()),
    }
}

pub fn schedules_suite(config: Option<&Path>, policy: &NumericPolicy) -> Vec<Row> {
    let poly = GammaSchedule::Polynomial {
        scale: 1.0,
        power: 2.0,
    };
    let sets = [
        (
            "nesterov",
            ScheduleSet::new(
                poly.clone(),
                AlphaSchedule::Linear {
                    slope: 1.0,
                    intercept: 0.0,
                },
                PsiRegularizer::Zero,
                1.0,
                50.0,
            ),
        ),
        (
            "exponential",
            ScheduleSet::new(
                GammaSchedule::Exponential {
                    scale: 1.0,
                    rate: 0.5,
                },
                AlphaSchedule::Constant { value: 1.0 },
                PsiRegularizer::Zero,
                0.0,
                10.0,
            ),
        ),
        (
            "norm-quadratic-psi",
            ScheduleSet::new(
                poly.clone(),
                AlphaSchedule::Power {
                    scale: 1.0,
                    power: 1.0,
                },
                PsiRegularizer::norm_quadratic(
                    RSchedule::ExpDecay {
                        initial: 1.0,
                        rate: 0.5,
                    },
                    0.0,
                    poly.clone(),
                ),
                1.0,
                10.0,
            ),
        ),
    ];
    let mut rows: Vec<Row> = sets
        .iter()
        .map(|(name, s)| schedule_row(name, s.as_ref().expect("valid interval"), policy))
        .collect();
    // decreasing γ must be rejected
    let decreasing = ScheduleSet::new(
        GammaSchedule::Polynomial {
            scale: 1.0,
            power: -1.0,
        },
        AlphaSchedule::Constant { value: 1.0 },
        PsiRegularizer::Zero,
        1.0,
        10.0,
    )
    .expect("valid interval");
    rows.push(Row::flag(
        "schedules",
        "rejects-decreasing-gamma",
        decreasing.validate(200, policy).is_err(),
        "",
    ));
    if let Some(path) = config {
        let name = format!("config:{}", path.display());
        match read_json::<RunConfig>(path).and_then(|(c, _)| c.schedules.build()) {
            Ok(set) => rows.push(schedule_row(&name, &set, policy)),
            Err(e) => rows.push(Row::flag("schedules", name, false, e.to_string())),
        }
    }
    rows
}

pub fn objectives_suite(seed: u64) -> Vec<Row> {
    const S: &str = "objectives";
    let quad = Quadratic::new(
        Mat::from_rows(&[[2.0, 0.5], [0.5, 1.0]]).expect("2×2"),
        vec![1.0, -1.0],
        0.5,
    )
    .expect("SPD");
    let ls = LeastSquares::new(
        Mat::from_rows(&[[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]).expect("3×2"),
        vec![1.0, 0.0, -1.0],
    )
    .expect("full rank");
    let lse = LogSumExp::new(
        Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]]).expect("3×2"),
        vec![0.0, 0.5, -0.5],
    )
    .expect("valid");
    let objs: [(&str, Arc<dyn Objective>); 3] = [
        ("quadratic", Arc::new(quad)),
        ("least-squares", Arc::new(ls)),
        ("log-sum-exp", Arc::new(lse)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for (name, obj) in &objs {
        let worst = (0..100)
            .map(|_| {
                let th: Vec<f64> = (0..obj.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
                grad_check(obj.as_ref(), &th, 1e-5)
            })
            .fold(0.0, f64::max);
        rows.push(Row::bound(S, format!("{name}-gradient"), worst, 1e-6));
        let min_bregman = convexity_spot_check(obj.as_ref(), 200, 2.0, seed);
        rows.push(Row::bound(
            S,
            format!("{name}-bregman-nonnegative"),
            -min_bregman,
            1e-12,
        ));
        if let Some(m) = obj.minimizer() {
            let g = obj.gradient(&m.theta);
            rows.push(Row::bound(
                S,
                format!("{name}-minimizer-stationary"),
                norm_inf_vec(&g),
                1e-10,
            ));
        }
    }
    rows
}

/// Worst |θ̇ + ∇f| relative to 1 + ‖∇f‖∞ over random states of the static
/// generator with γ = α² constant.
pub fn gradient_flow_rhs_error(seed: u64, states: usize) -> f64 {
    let obj: Arc<dyn Objective> = Arc::new(
        LogSumExp::new(
            Mat::from_rows(&[
                [1.0, 0.3, 0.0],
                [0.0, 1.0, -0.4],
                [-1.0, -1.0, 1.0],
                [0.2, 0.0, 0.5],
            ])
            .expect("4×3"),
            vec![0.1, -0.2, 0.3, 0.0],
        )
        .expect("valid"),
    );
    let sched = ScheduleSet::new(
        GammaSchedule::Constant { value: 4.0 },
        AlphaSchedule::Constant { value: 2.0 },
        PsiRegularizer::Zero,
        0.0,
        10.0,
    )
    .expect("valid interval");
    let n = obj.dim();
    let flow =
        FlowConfig::new(GeneratorModel::Static, sched, obj.clone(), vec![0.0; n]).expect("valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..states)
        .map(|_| {
            let t = rng.gen_range(0.0..10.0);
            let theta: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let (dtheta, _) = rhs_m0(&flow, t, &theta, &v);
            let g = obj.gradient(&theta);
            let err = dtheta
                .iter()
                .zip(&g)
                .map(|(d, gi)| (d + gi).abs())
                .fold(0.0, f64::max);
            err / (1.0 + norm_inf_vec(&g))
        })
        .fold(0.0, f64::max)
}

pub fn flow_equivalence_suite(opts: &VerifyOptions, policy: &NumericPolicy) -> Vec<Row> {
    const S: &str = "flow-equivalence";
    let mut rows = vec![Row::bound(
        S,
        "gradient-flow-rhs",
        gradient_flow_rhs_error(opts.seed, 1000),
        1e-14,
    )];
    for name in ["m1_example1", "m1_example2"] {
        let path = opts.presets.join(format!("{name}.json"));
        let outcome = crate::run::load_run(&path, policy).and_then(|r| crate::run::compare(&r));
        rows.push(match outcome {
            Ok(c) => Row::bound(
                S,
                format!("{name}-first-vs-second-order"),
                c.max_theta_deviation,
                c.tolerance,
            ),
            Err(e) => Row::flag(
                S,
                format!("{name}-first-vs-second-order"),
                false,
                e.to_string(),
            ),
        });
    }
    rows
}

/// Shipped preset files, sorted, excluding expected-results companions.
pub fn preset_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("cannot list {}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p
                    .file_name()
                    .is_some_and(|n| n.to_string_lossy().ends_with(".expected.json"))
        })
        .collect();
    out.sort();
    Ok(out)
}

/// True when the document is an adaptive scenario rather than an optimization run.
pub fn is_adaptive(path: &Path) -> Result<bool, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(v.get("plant").is_some())
}

fn preset_rows(path: &Path, seed: u64, policy: &NumericPolicy) -> Vec<Row> {
    const S: &str = "presets";
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let result: Result<Vec<passiflow::diagnostics::CheckResult>, CliError> = (|| {
        if is_adaptive(path)? {
            let (name, cfg, exp) = crate::adaptive_cmd::load_adaptive(path, policy)?;
            Ok(
                crate::adaptive_cmd::execute(&name, &cfg, exp.as_ref(), policy)?
                    .summary
                    .checks,
            )
        } else {
            let run = crate::run::load_run(path, policy)?;
            Ok(crate::run::execute(&run, policy, seed)?.summary.checks)
        }
    })();
    match result {
        Ok(checks) => checks
            .into_iter()
            .map(|c| Row {
                suite: S,
                name: format!("{stem}/{}", c.name),
                passed: c.passed,
                worst: c.worst,
                tolerance: c.tolerance,
                detail: String::new(),
            })
            .collect(),
        Err(e) => vec![Row::flag(S, stem, false, e.to_string())],
    }
}

pub fn presets_suite(opts: &VerifyOptions, policy: &NumericPolicy) -> Vec<Row> {
    let files = match preset_files(&opts.presets) {
        Ok(f) => f,
        Err(e) => return vec![Row::flag("presets", "listing", false, e.to_string())],
    };
    let jobs = opts.jobs.max(1);
    let mut slots: Vec<Vec<Row>> = vec![Vec::new(); files.len()];
    std::thread::scope(|scope| {
        let per = files.len().div_ceil(jobs).max(1);
        for (fs, ss) in files.chunks(per).zip(slots.chunks_mut(per)) {
            scope.spawn(move || {
                for (f, s) in fs.iter().zip(ss.iter_mut()) {
                    *s = preset_rows(f, opts.seed, policy);
                }
            });
        }
    });
    slots.into_iter().flatten().collect()
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions, policy: &NumericPolicy) -> Vec<Row> {
    match suite {
        Suite::Linalg => linalg_suite(opts.seed),
        Suite::Generator => generator_suite(opts.seed, policy),
        Suite::Schedules => schedules_suite(opts.config.as_deref(), policy),
        Suite::Objectives => objectives_suite(opts.seed),
        Suite::FlowEquivalence => flow_equivalence_suite(opts, policy),
        Suite::Presets => presets_suite(opts, policy),
        Suite::All => [
            Suite::Linalg,
            Suite::Generator,
            Suite::Schedules,
            Suite::Objectives,
            Suite::FlowEquivalence,
            Suite::Presets,
        ]
        .into_iter()
        .flat_map(|s| run_suite(s, opts, policy))
        .collect(),
    }
}

pub fn render_table(rows: &[Row]) -> String {
    let width = rows
        .iter()
        .map(|r| r.suite.len() + r.name.len() + 1)
        .max()
        .unwrap_or(10);
    let mut out = String::new();
    for r in rows {
        let key = format!("{}/{}", r.suite, r.name);
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        let nums = if r.worst.is_nan() {
            String::new()
        } else {
            format!("worst {:.3e} tol {:.3e}", r.worst, r.tolerance)
        };
        let line = format!("{verdict}  {key:<width$}  {nums} {}", r.detail);
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_are_seeded() {
        let a = objectives_suite(3);
        let b = objectives_suite(3);
        assert!(a.iter().all(|r| r.passed));
        assert_eq!(
            a.iter().map(|r| r.worst.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|r| r.worst.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn table_marks_failures() {
        let rows = vec![
            Row::bound("s", "ok", 1e-12, 1e-10),
            Row::bound("s", "bad", 1.0, 1e-10),
            Row::flag("s", "flag", true, "note"),
        ];
        let t = render_table(&rows);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("PASS  s/ok"));
        assert!(lines[1].starts_with("FAIL  s/bad"));
        assert!(lines[2].ends_with("note"));
    }

    #[test]
    fn linalg_and_generator_suites_pass() {
        let policy = NumericPolicy::default();
        for r in linalg_suite(42)
            .into_iter()
            .chain(generator_suite(42, &policy))
        {
            assert!(r.passed, "{r:?}");
        }
    }
}
