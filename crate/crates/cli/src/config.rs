//! JSON run configurations.
//!
//! Matrices and vectors are given inline as nested arrays, or as `"@path"`
//! naming a whitespace-separated numeric text file resolved against the
//! directory of the configuration file.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use passiflow::adaptive::{AdaptiveConfig, Basis, PlantConfig, Reference};
use passiflow::flow::{AnchorMode, FlowConfig, GeneratorModel};
use passiflow::generator::{synthesize, GeneratorRealization, GeneratorSpec};
use passiflow::linalg::Mat;
use passiflow::objectives::{builtin, BuiltinParams, Objective};
use passiflow::ode::{linspace, Method};
use passiflow::policy::NumericPolicy;
use passiflow::schedules::{AlphaSchedule, GammaSchedule, PsiRegularizer, RSchedule, ScheduleSet};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum MatrixSource {
    Inline(Vec<Vec<f64>>),
    File(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum VectorSource {
    Inline(Vec<f64>),
    File(String),
}

fn read_numbers(base: &Path, reference: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let rel = reference.strip_prefix('@').ok_or_else(|| {
        CliError::Config(format!(
            "file references must start with '@', got {reference:?}"
        ))
    })?;
    let path = base.join(rel);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        CliError::Config(format!("{}: not a number: {tok:?}", path.display()))
                    })
                })
                .collect()
        })
        .collect()
}

impl MatrixSource {
    pub fn load(&self, base: &Path) -> Result<Mat, CliError> {
        let rows = match self {
            MatrixSource::Inline(rows) => rows.clone(),
            MatrixSource::File(r) => read_numbers(base, r)?,
        };
        Mat::from_rows(&rows).map_err(|e| CliError::Config(format!("matrix: {e}")))
    }
}

impl VectorSource {
    pub fn load(&self, base: &Path) -> Result<Vec<f64>, CliError> {
        match self {
            VectorSource::Inline(v) => Ok(v.clone()),
            VectorSource::File(r) => Ok(read_numbers(base, r)?.into_iter().flatten().collect()),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ObjectiveBlock {
    Quadratic {
        hessian: MatrixSource,
        minimizer: VectorSource,
        #[serde(default)]
        f_min: f64,
    },
    LeastSquares {
        a: MatrixSource,
        b: VectorSource,
    },
    LogSumExp {
        a: MatrixSource,
        b: VectorSource,
    },
    Constant {
        dim: usize,
        value: f64,
    },
}

impl ObjectiveBlock {
    pub fn build(&self, base: &Path) -> Result<Arc<dyn Objective>, CliError> {
        let params = match self {
            ObjectiveBlock::Quadratic {
                hessian,
                minimizer,
                f_min,
            } => BuiltinParams::Quadratic {
                hessian: hessian.load(base)?,
                minimizer: minimizer.load(base)?,
                f_min: *f_min,
            },
            ObjectiveBlock::LeastSquares { a, b } => BuiltinParams::LeastSquares {
                a: a.load(base)?,
                b: b.load(base)?,
            },
            ObjectiveBlock::LogSumExp { a, b } => BuiltinParams::LogSumExp {
                a: a.load(base)?,
                b: b.load(base)?,
            },
            ObjectiveBlock::Constant { dim, value } => BuiltinParams::Constant {
                dim: *dim,
                value: *value,
            },
        };
        builtin(params).map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorBlock {
    #[default]
    Theta0,
    KnownMinimizer,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub objective: ObjectiveBlock,
    pub theta0: VectorSource,
    #[serde(default)]
    pub anchor: AnchorBlock,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorBlock {
    /// m = 0.
    Static,
    Companion {
        coeffs: Vec<f64>,
        q: MatrixSource,
        #[serde(default)]
        preconditioner: Option<MatrixSource>,
        #[serde(default)]
        x0: Option<VectorSource>,
        /// Added to every entry of C after synthesis; breaks passivity.
        #[serde(default)]
        output_perturbation: f64,
    },
    /// Marginal m = 1 generator with a₀ = 0.
    Nesterov {
        p: f64,
        #[serde(default)]
        x0: Option<VectorSource>,
    },
}

impl GeneratorBlock {
    /// Synthesizes the companion realization for problem dimension `dim`.
    pub fn realization(
        &self,
        base: &Path,
        dim: usize,
    ) -> Result<Option<GeneratorRealization>, CliError> {
        match self {
            GeneratorBlock::Companion {
                coeffs,
                q,
                preconditioner,
                output_perturbation,
                ..
            } => {
                let m = preconditioner.as_ref().map(|p| p.load(base)).transpose()?;
                let spec = GeneratorSpec::new(dim, coeffs.clone(), q.load(base)?, m)
                    .map_err(|e| CliError::Synthesis(e.to_string()))?;
                let mut g = synthesize(&spec).map_err(|e| CliError::Synthesis(e.to_string()))?;
                if *output_perturbation != 0.0 {
                    for j in 0..g.c.cols() {
                        g.c[(0, j)] += output_perturbation;
                    }
                }
                Ok(Some(g))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PsiBlock {
    Zero,
    NormQuadratic {
        r: RSchedule,
        #[serde(default)]
        delta: f64,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    pub gamma: GammaSchedule,
    pub alpha: AlphaSchedule,
    #[serde(default = "zero_psi")]
    pub psi: PsiBlock,
    pub t0: f64,
    pub tf: f64,
}

fn zero_psi() -> PsiBlock {
    PsiBlock::Zero
}

impl ScheduleBlock {
    pub fn build(&self) -> Result<ScheduleSet, CliError> {
        let psi = match &self.psi {
            PsiBlock::Zero => PsiRegularizer::Zero,
            PsiBlock::NormQuadratic { r, delta } => {
                PsiRegularizer::norm_quadratic(r.clone(), *delta, self.gamma.clone())
            }
        };
        ScheduleSet::new(
            self.gamma.clone(),
            self.alpha.clone(),
            psi,
            self.t0,
            self.tf,
        )
        .map_err(|e| CliError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathChoice {
    /// First-order pipeline, or the direct second-order ODE for the Nesterov generator.
    #[default]
    Auto,
    FirstOrder,
    SecondOrder,
    Nesterov,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Rk4,
    #[default]
    Dopri5,
}

/// Integrator settings; unset tolerances fall back to the numeric policy.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorBlock {
    #[serde(default)]
    pub method: MethodKind,
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub rtol: Option<f64>,
    #[serde(default)]
    pub atol: Option<f64>,
    /// Number of evenly spaced output samples including both ends.
    #[serde(default)]
    pub samples: Option<usize>,
}

pub const DEFAULT_SAMPLES: usize = 201;

impl IntegratorBlock {
    pub fn method(&self, policy: &NumericPolicy) -> Result<Method, CliError> {
        match self.method {
            MethodKind::Rk4 => {
                let step = self
                    .step
                    .ok_or_else(|| CliError::Config("rk4 needs integrator.step".into()))?;
                Ok(Method::Rk4 { step })
            }
            MethodKind::Dopri5 => Ok(Method::Dopri5 {
                rtol: self.rtol.unwrap_or(policy.rtol),
                atol: self.atol.unwrap_or(policy.atol),
                min_step: policy.min_step,
                max_steps: 10_000_000,
            }),
        }
    }

    pub fn samples(&self) -> usize {
        self.samples.unwrap_or(DEFAULT_SAMPLES)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsBlock {
    /// Window [t_lo, t_hi] for the log-log decay fits.
    #[serde(default)]
    pub decay_window: Option<[f64; 2]>,
    /// Slack overrides; missing entries keep the numeric policy.
    #[serde(default)]
    pub conservation_rel: Option<f64>,
    #[serde(default)]
    pub rate_bound_slack: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
    pub problem: ProblemBlock,
    pub generator: GeneratorBlock,
    pub schedules: ScheduleBlock,
    #[serde(default)]
    pub integrator: IntegratorBlock,
    #[serde(default)]
    pub path: PathChoice,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsBlock>,
    /// Samples for passivity verification of the generator.
    #[serde(default = "default_passivity_samples")]
    pub passivity_samples: usize,
}

fn default_passivity_samples() -> usize {
    1000
}

/// Reads `path` and returns the parsed document with its directory.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, PathBuf), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let doc = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((doc, base))
}

/// A run configuration with every block resolved.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub config: RunConfig,
    pub flow: FlowConfig,
    /// The synthesized realization, when the generator is a companion one.
    pub realization: Option<GeneratorRealization>,
    pub path: PathChoice,
}

impl RunConfig {
    pub fn resolve(&self, base: &Path, policy: &NumericPolicy) -> Result<ResolvedRun, CliError> {
        let objective = self.problem.objective.build(base)?;
        let theta0 = self.problem.theta0.load(base)?;
        let n = objective.dim();
        let schedules = self.schedules.build()?;
        let realization = self.generator.realization(base, n)?;
        let (model, x0, pre) = match &self.generator {
            GeneratorBlock::Static => (GeneratorModel::Static, None, None),
            GeneratorBlock::Companion {
                x0, preconditioner, ..
            } => (
                GeneratorModel::Dynamic(realization.clone().expect("companion realization")),
                x0.as_ref(),
                preconditioner.as_ref(),
            ),
            GeneratorBlock::Nesterov { p, x0 } => {
                (GeneratorModel::Marginal { p: *p }, x0.as_ref(), None)
            }
        };
        let bad = |e: passiflow::flow::FlowError| CliError::Config(e.to_string());
        let mut flow = FlowConfig::new(model, schedules, objective, theta0).map_err(bad)?;
        flow = flow
            .with_anchor(match &self.problem.anchor {
                AnchorBlock::Theta0 => AnchorMode::Theta0,
                AnchorBlock::KnownMinimizer => AnchorMode::KnownMinimizer,
                AnchorBlock::Explicit(c) => AnchorMode::Explicit(c.clone()),
            })
            .map_err(bad)?;
        if let Some(x0) = x0 {
            flow = flow.with_x0(x0.load(base)?).map_err(bad)?;
        }
        if let Some(m) = pre {
            flow = flow.with_preconditioner(m.load(base)?).map_err(bad)?;
        }
        let samples = self.integrator.samples();
        if samples < 2 {
            return Err(CliError::Config(
                "integrator.samples must be at least 2".into(),
            ));
        }
        flow = flow
            .with_method(self.integrator.method(policy)?)
            .with_output_times(linspace(self.schedules.t0, self.schedules.tf, samples))
            .map_err(bad)?;
        let path = match self.path {
            PathChoice::Auto if matches!(self.generator, GeneratorBlock::Nesterov { .. }) => {
                PathChoice::Nesterov
            }
            PathChoice::Auto => PathChoice::FirstOrder,
            other => other,
        };
        Ok(ResolvedRun {
            config: self.clone(),
            flow,
            realization,
            path,
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantBlock {
    pub am: MatrixSource,
    pub bp: MatrixSource,
    pub qe: MatrixSource,
    pub basis: Basis,
    pub theta_star: VectorSource,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveGeneratorBlock {
    pub coeffs: Vec<f64>,
    pub q: MatrixSource,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveRunConfig {
    pub name: String,
    #[serde(default)]
    pub description: Option<String>,
    pub plant: PlantBlock,
    pub generator: AdaptiveGeneratorBlock,
    pub alpha: AlphaSchedule,
    #[serde(default)]
    pub gamma: Option<GammaSchedule>,
    #[serde(default)]
    pub theta0: Option<VectorSource>,
    #[serde(default)]
    pub e0: Option<VectorSource>,
    #[serde(default)]
    pub x_ref0: Option<VectorSource>,
    pub t0: f64,
    pub tf: f64,
    #[serde(default)]
    pub integrator: Option<IntegratorBlock>,
    /// `"@file"` with oracle-pinned decay factors.
    #[serde(default)]
    pub expected: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, serde::Serialize)]
pub struct Checkpoint {
    pub t: f64,
    pub theta_ratio: f64,
    pub e_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, serde::Serialize)]
pub struct ExpectedAdaptive {
    pub theta_decay_max: f64,
    pub e_decay_max: f64,
    #[serde(default)]
    pub checkpoints: Vec<Checkpoint>,
    pub checkpoint_rel_tol: f64,
    #[serde(default)]
    pub omega_pd_from: Option<f64>,
    #[serde(default)]
    pub oracle_theta_decay: Option<f64>,
    #[serde(default)]
    pub oracle_e_decay: Option<f64>,
    #[serde(default)]
    pub oracle: Option<String>,
}

impl AdaptiveRunConfig {
    pub fn resolve(
        &self,
        base: &Path,
        policy: &NumericPolicy,
    ) -> Result<(AdaptiveConfig, Option<ExpectedAdaptive>), CliError> {
        let plant = PlantConfig::new(
            self.plant.am.load(base)?,
            self.plant.bp.load(base)?,
            self.plant.qe.load(base)?,
            self.plant.basis,
            self.plant.theta_star.load(base)?,
            self.plant.reference.clone(),
            self.plant.lambda,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        let n = plant.params();
        let spec = GeneratorSpec::new(
            n,
            self.generator.coeffs.clone(),
            self.generator.q.load(base)?,
            None,
        )
        .map_err(|e| CliError::Synthesis(e.to_string()))?;
        let gen = synthesize(&spec).map_err(|e| CliError::Synthesis(e.to_string()))?;
        let mut cfg = AdaptiveConfig::new(plant, gen, self.alpha.clone(), self.t0, self.tf)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(g) = &self.gamma {
            cfg.gamma = g.clone();
        }
        if let Some(v) = &self.theta0 {
            cfg.theta0 = v.load(base)?;
        }
        if let Some(v) = &self.e0 {
            cfg.e0 = v.load(base)?;
        }
        if let Some(v) = &self.x_ref0 {
            cfg.x_ref0 = v.load(base)?;
        }
        if let Some(ib) = &self.integrator {
            cfg.method = ib.method(policy)?;
            if let Some(k) = ib.samples {
                if k < 2 {
                    return Err(CliError::Config(
                        "integrator.samples must be at least 2".into(),
                    ));
                }
                cfg.output_times = linspace(self.t0, self.tf, k);
            }
        }
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let expected = match &self.expected {
            None => None,
            Some(r) => {
                let rel = r.strip_prefix('@').ok_or_else(|| {
                    CliError::Config(format!("expected must be an '@file' reference, got {r:?}"))
                })?;
                Some(read_json::<ExpectedAdaptive>(&base.join(rel))?.0)
            }
        };
        Ok((cfg, expected))
    }
}

/// Stand-alone generator description for `synth`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub coeffs: Vec<f64>,
    pub q: MatrixSource,
    #[serde(default = "one")]
    pub dim: usize,
    #[serde(default)]
    pub preconditioner: Option<MatrixSource>,
    #[serde(default)]
    pub output_perturbation: f64,
    #[serde(default = "default_passivity_samples")]
    pub passivity_samples: usize,
}

fn one() -> usize {
    1
}

impl SynthConfig {
    pub fn realization(&self, base: &Path) -> Result<GeneratorRealization, CliError> {
        let block = GeneratorBlock::Companion {
            coeffs: self.coeffs.clone(),
            q: self.q.clone(),
            preconditioner: self.preconditioner.clone(),
            x0: None,
            output_perturbation: self.output_perturbation,
        };
        Ok(block.realization(base, self.dim)?.expect("companion block"))
    }
}
