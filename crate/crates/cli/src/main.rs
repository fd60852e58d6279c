use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use passiflow::generator::verify_passivity;
use passiflow::policy::NumericPolicy;
use passiflow_cli::config::{read_json, SynthConfig};
use passiflow_cli::output::{to_json, write_file};
use passiflow_cli::verify::{render_table, run_suite, Suite, VerifyOptions};
use passiflow_cli::{adaptive_cmd, run, CliError};

#[derive(Parser)]
#[command(
    name = "passiflow",
    version,
    about = "Passivity-based optimization flows with certificates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a companion generator and report its KYP data.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate one optimization run and certify it.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Exit 1 when any certificate fails.
        #[arg(long)]
        strict: bool,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run one invariant suite and print a pass/fail table.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
        /// Preset directory, or a run configuration for the schedules suite.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Simulate an adaptive-control scenario.
    Adaptive {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        strict: bool,
    },
    /// Compare the generic first-order pipeline with the second-order form.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_presets() -> PathBuf {
    let local = PathBuf::from("presets");
    if local.is_dir() {
        local
    } else {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets")
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn print_checks(checks: &[passiflow::diagnostics::CheckResult]) {
    for c in checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict}  {:<28} worst {:.3e} tol {:.3e}",
            c.name, c.worst, c.tolerance
        );
    }
}

fn synth(
    config: &Path,
    seed: u64,
    out: Option<&Path>,
    policy: &NumericPolicy,
) -> Result<(), CliError> {
    let (cfg, base): (SynthConfig, _) = read_json(config)?;
    let g = cfg.realization(&base)?;
    let report = verify_passivity(&g, cfg.passivity_samples, seed, policy);
    println!("Am =\n{}", g.a);
    println!("Bm =\n{}", g.b);
    println!("Cm =\n{}", g.c);
    println!("Pm =\n{}", g.p);
    println!(
        "lyapunov residual (relative) = {:.3e}",
        g.relative_residual()
    );
    println!("kyp mismatch max|PB - C^T| = {:.3e}", g.kyp_mismatch());
    println!(
        "passivity: {} samples, max violation {:.3e} (relative {:.3e})",
        report.samples, report.max_abs_violation, report.max_rel_violation
    );
    if let Some(dir) = out {
        let doc = serde_json::json!({
            "coeffs": g.coeffs,
            "a": g.a.to_rows(),
            "b": g.b.to_rows(),
            "c": g.c.to_rows(),
            "p": g.p.to_rows(),
            "lyapunov_relative_residual": g.relative_residual(),
            "passivity": report,
        });
        write_file(dir, &format!("{}.synth.json", stem(config)), &to_json(&doc))?;
    }
    let residual_ok = g.relative_residual() <= policy.lyapunov_residual_rel;
    if !(report.passed && residual_ok) {
        return Err(CliError::Certificate(
            "realization fails the passivity identity".into(),
        ));
    }
    Ok(())
}

fn run_cmd(
    config: &Path,
    out: &Path,
    strict: bool,
    seed: u64,
    policy: &NumericPolicy,
) -> Result<(), CliError> {
    let resolved = run::load_run(config, policy)?;
    let outcome = run::execute(&resolved, policy, seed)?;
    let name = stem(config);
    write_file(out, &format!("{name}.csv"), &outcome.csv)?;
    write_file(
        out,
        &format!("{name}.summary.json"),
        &to_json(&outcome.summary),
    )?;
    let s = &outcome.summary;
    println!("{} ({}, {:?}): E0 = {:.6e}", s.name, s.label, s.path, s.e0);
    if let Some(gf) = s.gradient_flow_equivalence {
        println!("gradient-flow equivalence: {gf}");
    }
    if let Some(p) = s.gap_decay_exponent {
        println!("gap decay exponent: {p:.4}");
    }
    if let Some(p) = s.bound_decay_exponent {
        println!("bound decay exponent: {p:.4}");
    }
    print_checks(&s.checks);
    println!("wall time {:.3}s", s.wall_time_s);
    if strict && !s.passed {
        return Err(CliError::Certificate(format!(
            "{} failed its certificates",
            s.name
        )));
    }
    Ok(())
}

fn adaptive(
    config: &Path,
    out: &Path,
    strict: bool,
    policy: &NumericPolicy,
) -> Result<(), CliError> {
    let (name, cfg, expected) = adaptive_cmd::load_adaptive(config, policy)?;
    let outcome = adaptive_cmd::execute(&name, &cfg, expected.as_ref(), policy)?;
    let file = stem(config);
    write_file(out, &format!("{file}.csv"), &outcome.csv)?;
    write_file(
        out,
        &format!("{file}.summary.json"),
        &to_json(&outcome.summary),
    )?;
    let s = &outcome.summary;
    println!(
        "{}: V_T(t0) = {:.6e}, max relative increase {:.3e} at t = {}",
        s.name, s.v_total0, s.max_relative_increase, s.max_increase_t
    );
    println!(
        "theta_tilde ratio {:.3e}, e ratio {:?}",
        s.theta_decay, s.e_decay
    );
    for n in &s.notes {
        println!("note: {n}");
    }
    print_checks(&s.checks);
    if strict && !s.passed {
        return Err(CliError::Certificate(format!(
            "{} failed its certificates",
            s.name
        )));
    }
    Ok(())
}

fn compare(config: &Path, out: Option<&Path>, policy: &NumericPolicy) -> Result<(), CliError> {
    let resolved = run::load_run(config, policy)?;
    let c = run::compare(&resolved)?;
    println!(
        "{}: max |dtheta|_inf = {:.3e} (tol {:.1e})",
        c.name, c.max_theta_deviation, c.tolerance
    );
    if let Some(dir) = out {
        write_file(dir, &format!("{}.compare.json", stem(config)), &to_json(&c))?;
    }
    if !c.passed {
        return Err(CliError::Certificate("pipelines disagree".into()));
    }
    Ok(())
}

fn verify(
    suite: Suite,
    config: Option<PathBuf>,
    jobs: usize,
    seed: u64,
    policy: &NumericPolicy,
) -> Result<(), CliError> {
    let (presets, extra) = match config {
        Some(p) if p.is_dir() => (p, None),
        Some(p) => (default_presets(), Some(p)),
        None => (default_presets(), None),
    };
    let opts = VerifyOptions {
        seed,
        jobs,
        presets,
        config: extra,
    };
    let rows = run_suite(suite, &opts, policy);
    print!("{}", render_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed).count();
    println!("{}: {} rows, {failed} failed", suite.label(), rows.len());
    if failed > 0 {
        return Err(CliError::Certificate(format!("{failed} rows failed")));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let policy = match NumericPolicy::from_env() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth { config, seed, out } => synth(&config, seed, out.as_deref(), &policy),
        Command::Run {
            config,
            out,
            strict,
            seed,
        } => run_cmd(&config, &out, strict, seed, &policy),
        Command::Verify {
            suite,
            config,
            jobs,
            seed,
        } => verify(suite, config, jobs, seed, &policy),
        Command::Adaptive {
            config,
            out,
            strict,
        } => adaptive(&config, &out, strict, &policy),
        Command::Compare { config, out } => compare(&config, out.as_deref(), &policy),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
