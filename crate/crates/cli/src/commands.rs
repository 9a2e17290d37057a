use std::path::Path;

use anyhow::{bail, Context};
use nalgebra::DVector;

use game_ddp::diagnostics::{
    closeness_study, equilibrium_search_config, order_study, random_directions, validate_epsilons,
};
use game_ddp::diff::{verify_derivatives, VerifyOutcome};
use game_ddp::io::{self, write_atomic, write_json};
use game_ddp::newton::{newton_step_dense, DenseOptions};
use game_ddp::problems::{known_ids, BuiltProblem, ParamValue, REGISTRY};
use game_ddp::{
    quadraticize, rollout, solve as run_solver, stack_inputs, AcceptRule, DerivativeMode,
    DerivativeProvider, Error, GameProblem, ProblemSpec, SolveStatus, SolverConfig,
};

use crate::args::{
    AcceptArg, AlphaSearch, CheckArgs, CompareArgs, ProblemArgs, ProviderArg, SolveArgs, StudyArgs,
};
use crate::exit;
use crate::manifest::RunManifest;

struct Loaded {
    spec: ProblemSpec,
    built: BuiltProblem,
    mode: DerivativeMode,
}

impl Loaded {
    fn problem(&self) -> &GameProblem {
        &self.built.problem
    }

    fn provider(&self) -> DerivativeProvider {
        DerivativeProvider::for_problem(self.problem(), self.mode)
    }
}

fn parse_param(text: &str) -> anyhow::Result<(String, ParamValue)> {
    let (name, value) = text
        .split_once('=')
        .with_context(|| format!("expected NAME=VALUE, got `{text}`"))?;
    let values = value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("`{name}`: `{v}` is not a number"))
        })
        .collect::<anyhow::Result<Vec<f64>>>()?;
    let value = match values.as_slice() {
        [v] if !value.contains(',') => ParamValue::Scalar(*v),
        _ => ParamValue::Vector(values),
    };
    Ok((name.trim().to_string(), value))
}

fn load(args: &ProblemArgs) -> anyhow::Result<Loaded> {
    let mut spec = match &args.config {
        Some(path) => {
            ProblemSpec::load(path).with_context(|| format!("reading {}", path.display()))?
        }
        None => ProblemSpec::default(),
    };
    if let Some(id) = &args.problem {
        spec.id = id.clone();
    }
    if spec.id.is_empty() {
        bail!("no problem given (known: {})", known_ids());
    }
    for p in &args.params {
        let (name, value) = parse_param(p)?;
        spec.parameters.insert(name, value);
    }
    if let Some(seed) = args.seed {
        if REGISTRY
            .iter()
            .any(|e| e.id == spec.id && e.parameters.contains(&"seed"))
        {
            spec.parameters
                .insert("seed".into(), ParamValue::Scalar(seed as f64));
        }
    }
    let built = spec.build()?;
    for note in &built.notes {
        eprintln!("note: {note}");
    }
    let mode = match args.provider {
        ProviderArg::Analytic => DerivativeMode::Analytic,
        ProviderArg::Fd => DerivativeMode::FiniteDifference,
        ProviderArg::Hybrid => DerivativeMode::Hybrid,
    };
    Ok(Loaded { spec, built, mode })
}

fn start_inputs(problem: &GameProblem, path: Option<&Path>) -> anyhow::Result<Vec<DVector<f64>>> {
    match path {
        None => Ok(problem.zero_inputs()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(io::read_trajectory_csv(&text)?.inputs)
        }
    }
}

fn solver_config(a: &SolveArgs) -> SolverConfig {
    let (mut config, unconditional) = match (a.reg, a.reg_adaptive) {
        (Some(lambda), _) => (SolverConfig::fixed_lambda(lambda), true),
        (None, Some(lambda)) => (
            SolverConfig {
                lambda_init: lambda,
                ..SolverConfig::default()
            },
            false,
        ),
        (None, None) => (SolverConfig::default(), false),
    };
    config.max_iters = a.max_iters;
    config.residual_tol = a.tol;
    config.accept_rule = match a.accept {
        Some(AcceptArg::Always) => AcceptRule::Always,
        Some(AcceptArg::AnyPlayerCostDecrease) => AcceptRule::AnyPlayerCostDecrease,
        Some(AcceptArg::ResidualDecrease) => AcceptRule::ResidualDecrease,
        None if unconditional => AcceptRule::Always,
        None => config.accept_rule,
    };
    match a.alpha_search {
        Some(AlphaSearch::Off) => config.line_search = vec![1.0],
        Some(AlphaSearch::Halving) => {}
        None if unconditional => config.line_search = vec![1.0],
        None => {}
    }
    config.record_iterates = a.snapshot_every.is_some();
    config
}

fn status_code(status: SolveStatus) -> u8 {
    match status {
        SolveStatus::Converged => exit::OK,
        SolveStatus::MaxIters | SolveStatus::Stalled => exit::MAX_ITERS,
        SolveStatus::RegularizationExhausted => exit::REG_EXHAUSTED,
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn json_bytes(value: &serde_json::Value) -> anyhow::Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

pub fn solve(a: &SolveArgs) -> anyhow::Result<u8> {
    let loaded = load(&a.problem)?;
    let problem = loaded.problem();
    let provider = loaded.provider();
    let config = solver_config(a);
    if a.snapshot_every == Some(0) {
        bail!("--snapshot-every must be at least 1");
    }
    let start = start_inputs(problem, a.inputs.as_deref())?;
    let (traj, report) = run_solver(problem, &start, &config, &provider)?;

    let mut files: Vec<(String, Vec<u8>)> = vec![
        ("trajectory.csv".into(), io::trajectory_csv(&traj)?),
        (
            "trajectory.json".into(),
            json_bytes(&serde_json::to_value(io::TrajectoryJson::new(
                problem.id(),
                &traj,
            ))?)?,
        ),
        ("report.csv".into(), io::report_csv(&report)?),
    ];
    if let Some(every) = a.snapshot_every {
        let last = report.iterates.len().saturating_sub(1);
        for (i, snap) in report.iterates.iter().enumerate() {
            if i % every == 0 || i == last {
                files.push((
                    format!("snapshots/iter_{i:04}.csv"),
                    io::trajectory_csv(snap)?,
                ));
            }
        }
    }
    if a.dump_derivatives {
        let quads = quadraticize(problem, &traj, &provider)?;
        files.push((
            "derivatives.json".into(),
            json_bytes(&io::derivatives_json(&quads))?,
        ));
    }
    if a.dump_newton {
        match newton_step_dense(problem, &traj, &provider, DenseOptions::default()) {
            Ok(system) => {
                files.push(("newton.json".into(), json_bytes(&io::newton_json(&system))?))
            }
            Err(e) => eprintln!("warning: newton dump skipped: {e}"),
        }
    }

    let mut manifest = RunManifest::new(
        "solve",
        &loaded.spec,
        &loaded.built.notes,
        &loaded.mode.to_string(),
        &a.out,
    );
    manifest.settings = serde_json::json!({
        "solver": config,
        "loop_policy": "stopping, step acceptance, line search and λ schedule are choices of this tool, not part of the method",
        "status": report.status,
        "final_residual": report.final_residual,
        "accepted_iterations": report.accepted_iterations(),
    });
    manifest.outputs = std::iter::once("manifest.json".to_string())
        .chain(files.iter().map(|f| f.0.clone()))
        .collect();
    manifest.write()?;
    for (name, bytes) in &files {
        write_file(&a.out, name, bytes)?;
    }
    manifest.finish()?;

    let last = report.records.last().unwrap_or(&report.initial);
    println!(
        "status {:?} after {} iterations ({} accepted): residual {:e}, costs {:?}",
        report.status,
        report.records.len(),
        report.accepted_iterations(),
        report.final_residual,
        last.costs
    );
    Ok(status_code(report.status))
}

pub fn compare_newton(a: &CompareArgs) -> anyhow::Result<u8> {
    let loaded = load(&a.problem)?;
    let problem = loaded.problem();
    let provider = loaded.provider();
    let traj = rollout(problem, &start_inputs(problem, a.inputs.as_deref())?)?;
    let dense = match newton_step_dense(
        problem,
        &traj,
        &provider,
        DenseOptions {
            cap: a.cap,
            ..DenseOptions::default()
        },
    ) {
        Ok(d) => d,
        Err(e @ Error::OracleCapExceeded { .. }) => {
            eprintln!("error: {e}");
            return Ok(exit::CAP_EXCEEDED);
        }
        Err(e) => return Err(e.into()),
    };
    let dp = game_ddp::newton_step_dp(problem, &traj, &provider, a.lambda)?;
    let dp = stack_inputs(problem.dims(), &dp)?;
    let gap = (&dp - &dense.solution).amax() / dense.solution.amax().max(f64::MIN_POSITIVE);
    println!(
        "relative gap {gap:e} (dense step norm {:e}, lambda {})",
        dense.solution.amax(),
        a.lambda
    );
    if let Some(out) = &a.out {
        let mut manifest = RunManifest::new(
            "compare-newton",
            &loaded.spec,
            &loaded.built.notes,
            &loaded.mode.to_string(),
            out,
        );
        manifest.settings = serde_json::json!({ "lambda": a.lambda, "rtol": a.rtol, "cap": a.cap, "relative_gap": gap });
        manifest.outputs = vec!["manifest.json".into(), "newton.json".into()];
        manifest.write()?;
        write_json(&out.join("newton.json"), &io::newton_json(&dense))?;
        manifest.finish()?;
    }
    Ok(if gap <= a.rtol {
        exit::OK
    } else {
        exit::NEWTON_GAP
    })
}

pub fn convergence_study(a: &StudyArgs) -> anyhow::Result<u8> {
    if let Err(e) = validate_epsilons(&a.epsilons) {
        eprintln!("error: {e}");
        return Ok(exit::USAGE);
    }
    if a.directions == 0 {
        bail!("--directions must be at least 1");
    }
    let loaded = load(&a.problem)?;
    let problem = loaded.problem();
    let provider = loaded.provider();
    let orders = match order_study(
        problem,
        &problem.zero_inputs(),
        &provider,
        &equilibrium_search_config(),
    ) {
        Ok(o) => o,
        Err(
            e @ (Error::EquilibriumNotCertified { .. }
            | Error::SingularStageGame { .. }
            | Error::SingularNewtonSystem { .. }),
        ) => {
            eprintln!("error: could not certify an equilibrium: {e}");
            return Ok(exit::NOT_CERTIFIED);
        }
        Err(e) => return Err(e.into()),
    };
    let u_star = &orders.u_star;
    let directions = random_directions(
        problem.dims().stacked_len(),
        a.directions,
        a.problem.seed.unwrap_or(0),
    );
    let study = match closeness_study(problem, u_star, &directions, &a.epsilons, &provider) {
        Ok(s) => s,
        Err(e @ Error::EquilibriumNotCertified { .. }) => {
            eprintln!("error: {e}");
            return Ok(exit::NOT_CERTIFIED);
        }
        Err(e) => return Err(e.into()),
    };

    let files: Vec<(&str, Vec<u8>)> = vec![
        ("closeness.csv", io::closeness_csv(&study)?),
        ("slopes.json", json_bytes(&io::slopes_json(&study))?),
        ("order.json", json_bytes(&io::order_json(&orders))?),
        ("iterate_errors.csv", io::iterate_errors_csv(&orders)?),
    ];
    let mut manifest = RunManifest::new(
        "convergence-study",
        &loaded.spec,
        &loaded.built.notes,
        &loaded.mode.to_string(),
        &a.out,
    );
    manifest.settings = serde_json::json!({
        "epsilons": a.epsilons,
        "directions": a.directions,
        "direction_seed": a.problem.seed.unwrap_or(0),
        "equilibrium_search": equilibrium_search_config(),
    });
    manifest.outputs = std::iter::once("manifest.json".to_string())
        .chain(files.iter().map(|f| f.0.to_string()))
        .collect();
    manifest.write()?;
    for (name, bytes) in &files {
        write_file(&a.out, name, bytes)?;
    }
    manifest.finish()?;

    for (name, fit) in &study.slopes {
        println!(
            "{name:>14}: {}",
            fit.slope()
                .map_or_else(|| format!("{fit:?}"), |s| format!("{s:.3}"))
        );
    }
    let show = |r: &Result<game_ddp::diagnostics::ConvergenceOrderEstimate, String>| {
        r.as_ref()
            .map_or_else(|e| e.clone(), |o| format!("{:.3}", o.order))
    };
    println!(
        "order (ddp): {}\norder (newton): {}",
        show(&orders.ddp),
        show(&orders.newton)
    );
    Ok(exit::OK)
}

pub fn check_derivatives(a: &CheckArgs) -> anyhow::Result<u8> {
    let loaded = load(&a.problem)?;
    let problem = loaded.problem();
    let mut provider = loaded.provider();
    if a.inject_fault {
        let Some(good) = provider.analytic.dynamics_jacobian.clone() else {
            bail!(
                "problem `{}` has no analytic dynamics Jacobian to corrupt",
                problem.id()
            );
        };
        provider.analytic.dynamics_jacobian = Some(std::sync::Arc::new(
            move |k, x: &DVector<f64>, u: &DVector<f64>| good(k, x, u).add_scalar(0.1),
        ));
    }
    let traj = rollout(problem, &start_inputs(problem, a.inputs.as_deref())?)?;
    match verify_derivatives(problem, &traj, &provider)? {
        VerifyOutcome::NotApplicable => {
            println!("no analytic derivatives to check");
            Ok(exit::OK)
        }
        VerifyOutcome::Report(report) => {
            println!(
                "{:<18} {:>12} {:>6} {:>9} {:>8}",
                "kind", "max_rel_err", "stage", "component", "entry"
            );
            for c in &report.checks {
                let component = c.component.map_or("-".to_string(), |v| v.to_string());
                println!(
                    "{:<18} {:>12.3e} {:>6} {:>9} {:>8}",
                    c.kind.to_string(),
                    c.max_rel_error,
                    c.stage,
                    component,
                    format!("{:?}", c.entry)
                );
            }
            let worst = report.max_rel_error();
            if worst <= a.max_rel_err {
                println!(
                    "pass: worst relative error {worst:.3e} <= {:e}",
                    a.max_rel_err
                );
                Ok(exit::OK)
            } else {
                println!(
                    "FAIL: worst relative error {worst:.3e} > {:e}",
                    a.max_rel_err
                );
                Ok(exit::DERIVATIVE_MISMATCH)
            }
        }
    }
}

pub fn list_problems() -> anyhow::Result<u8> {
    for e in REGISTRY {
        println!(
            "{:<14} [{}]\n    {}",
            e.id,
            e.parameters.join(", "),
            e.description
        );
    }
    Ok(exit::OK)
}
