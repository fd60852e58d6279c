use std::sync::Arc;

use passiflow::diagnostics::certify;
use passiflow::flow::{
    integrate, integrate_closed_form_m1, max_theta_deviation, AnchorMode, FlowConfig,
    GeneratorModel,
};
use passiflow::generator::{synthesize, verify_passivity, GeneratorSpec};
use passiflow::linalg::Mat;
use passiflow::objectives::{Objective, Quadratic};
use passiflow::policy::NumericPolicy;
use passiflow::schedules::{AlphaSchedule, GammaSchedule, PsiRegularizer, ScheduleSet};

fn quadratic() -> Arc<dyn Objective> {
    Arc::new(Quadratic::new(Mat::diag(&[1.0, 4.0]), vec![0.5, -0.5], 1.0).unwrap())
}

fn schedules() -> ScheduleSet {
    ScheduleSet::new(
        GammaSchedule::Polynomial {
            scale: 1.0,
            power: 2.0,
        },
        AlphaSchedule::Power {
            scale: 1.0,
            power: 1.0,
        },
        PsiRegularizer::Zero,
        1.0,
        8.0,
    )
    .unwrap()
}

#[test]
fn synthesized_generator_drives_a_certified_flow() {
    let policy = NumericPolicy::default();
    let g =
        synthesize(&GeneratorSpec::new(2, vec![0.5], Mat::diag(&[1.0]), None).unwrap()).unwrap();
    assert!(verify_passivity(&g, 500, 7, &policy).passed);
    let cfg = FlowConfig::new(
        GeneratorModel::Dynamic(g),
        schedules(),
        quadratic(),
        vec![2.0, 2.0],
    )
    .unwrap()
    .with_anchor(AnchorMode::KnownMinimizer)
    .unwrap();
    cfg.validate(&policy).unwrap();
    let traj = integrate(&cfg).unwrap();
    let report = certify(&cfg, &traj, &policy).unwrap();
    assert!(report.passed, "{:?}", report.checks);
    assert!(report.samples.last().unwrap().gap < report.samples[0].gap);

    let second = integrate_closed_form_m1(&cfg).unwrap();
    assert!(max_theta_deviation(&traj, &second) <= 1e-6);
}

#[test]
fn anchor_relative_run_is_labelled() {
    let policy = NumericPolicy::default();
    let g =
        synthesize(&GeneratorSpec::new(2, vec![1.0], Mat::diag(&[2.0]), None).unwrap()).unwrap();
    let cfg = FlowConfig::new(
        GeneratorModel::Dynamic(g),
        schedules(),
        quadratic(),
        vec![2.0, 2.0],
    )
    .unwrap();
    let traj = integrate(&cfg).unwrap();
    let report = certify(&cfg, &traj, &policy).unwrap();
    assert_eq!(report.label, "anchor-relative");
    assert!(report.passed);
}
