use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde_json::json;

use pdmg_core::approx::{ladder_run, LadderKind, Probe};
use pdmg_core::io::{self, Solution};
use pdmg_core::matrix_game::{self, Side};
use pdmg_core::model::{load_model_file, GameModel};
use pdmg_core::shapley::{
    backward_solve, best_response_solve, picard_solve, policy_evaluate, Scheme, SolverConfig, StrategyField,
};
use pdmg_core::simulate::{estimate_j, sample_paths, SimConfig};
use pdmg_core::verify::{
    check_assumptions, check_bounds, check_monotone_in_time, check_positivity, exploitability, oracle_fine_grid, Check,
    VerificationReport,
};

use crate::manifest::Run;
use crate::{Cli, Command, KindArg, SchemeArg, SideArg};

const MONOTONE_SLACK: f64 = 1e-10;

/// Runs one subcommand; `Ok(false)` means a check failed.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Validate { model, steps } => validate(cli, model, *steps),
        Command::Solve { model, solver, scheme } => {
            let config = SolverConfig {
                steps: solver.steps,
                game_tol: solver.tol,
                scheme: match scheme {
                    SchemeArg::SemiLagrangian => Scheme::SemiLagrangian,
                    SchemeArg::Picard => Scheme::Picard,
                },
                ..Default::default()
            };
            solve(cli, model, config)
        }
        Command::Evaluate { model, strategies, steps } => evaluate(cli, model, strategies, *steps),
        Command::BestResponse { model, strategies, side, steps, tol } => {
            best_response(cli, model, strategies, *side, *steps, *tol)
        }
        Command::Simulate { model, strategies, t0, x0, paths, seed, dump } => {
            let config = SimConfig { n_paths: *paths, seed: *seed, ..Default::default() };
            simulate(cli, model, strategies, *t0, x0, *dump, config)
        }
        Command::Verify { model, field, strategies, refine, tol, check_steps } => {
            verify(cli, model, field, strategies.as_deref(), *refine, *tol, *check_steps)
        }
        Command::Ladder { model, n_list, kind, probe, solver } => {
            let config = SolverConfig { steps: solver.steps, game_tol: solver.tol, ..Default::default() };
            ladder(cli, model, n_list, *kind, probe, config)
        }
        Command::Game { matrix, tol } => game(cli, matrix, *tol),
        Command::Oracle { model, solver, refine, picard } => {
            let config = SolverConfig { steps: solver.steps, game_tol: solver.tol, ..Default::default() };
            oracle(cli, model, config, *refine, *picard)
        }
    }
}

fn load(path: &Path) -> Result<GameModel> {
    load_model_file(path).with_context(|| format!("loading {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_solution(path: &Path, model: &GameModel) -> Result<Solution> {
    io::read_solution_csv(&read_text(path)?, model).with_context(|| format!("reading {}", path.display()))
}

fn read_strategies(path: &Path, model: &GameModel) -> Result<StrategyField> {
    read_solution(path, model)?
        .strategies
        .ok_or_else(|| anyhow!(pdmg_core::Error::Schema(format!("{} has no mixture columns", path.display()))))
}

fn print_checks(report: &VerificationReport) {
    for c in &report.checks {
        let status = if c.passed { "ok  " } else { "FAIL" };
        let at = c.worst.as_deref().map(|w| format!(" at {w}")).unwrap_or_default();
        let note = c.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default();
        println!("{status} {:<18} margin {:.6e}{at}{note}", c.name, c.margin);
    }
}

/// Nonnegative costs, a constant nonnegative terminal payoff and a single
/// time segment: the setting in which the value decreases in time.
fn monotone_expected(model: &GameModel) -> bool {
    let g0 = model.terminal(0);
    model.segments().len() == 1
        && model.min_cost() >= 0.0
        && g0 >= 0.0
        && (0..model.n_states()).all(|x| model.terminal(x) == g0)
}

fn validate(cli: &Cli, model_path: &Path, steps: usize) -> Result<bool> {
    let model = load(model_path)?;
    println!(
        "model: {} states, lambda {}, horizon {}, {} segment(s)",
        model.n_states(),
        model.lambda,
        model.horizon,
        model.segments().len()
    );
    let mut run = Run::new(&cli.out)?;
    let report = if model.lyapunov.is_some() {
        let r = check_assumptions(&model, steps)?;
        print_checks(&r);
        Some(r)
    } else {
        println!("assumptions: skipped (no Lyapunov data)");
        None
    };
    let passed = report.as_ref().is_none_or(|r| r.passed);
    run.write("validate.json", &io::to_json(&json!({ "assumptions": report, "passed": passed }))?)?;
    run.finish("validate", Some(model_path), json!({ "steps": steps }), None, passed)?;
    Ok(passed)
}

fn solve(cli: &Cli, model_path: &Path, config: SolverConfig) -> Result<bool> {
    let model = load(model_path)?;
    let mut run = Run::new(&cli.out)?;
    let csv = match config.scheme {
        Scheme::SemiLagrangian => {
            let (field, strategies) = backward_solve(&model, &config)?;
            print_values_at_0(&model, field.slice(0));
            io::solution_csv_string(&model, &field, Some(&strategies))?
        }
        Scheme::Picard => {
            let (field, report) = picard_solve(&model, &config)?;
            println!("picard: {} sweeps, last residual {:.3e}", report.sweeps, report.residuals.last().unwrap_or(&0.0));
            run.write("picard.json", &io::to_json(&report)?)?;
            print_values_at_0(&model, field.slice(0));
            io::solution_csv_string(&model, &field, None)?
        }
    };
    run.write("solution.csv", &csv)?;
    run.finish("solve", Some(model_path), serde_json::to_value(&config)?, None, true)?;
    Ok(true)
}

fn print_values_at_0(model: &GameModel, phi: &[f64]) {
    const SHOWN: usize = 10;
    for (x, &p) in phi.iter().enumerate().take(SHOWN) {
        println!("phi(0, {}) = {:.10} (risk value {:.10})", model.states.name(x), p, p.ln() / model.lambda);
    }
    if phi.len() > SHOWN {
        println!("... {} more states in solution.csv", phi.len() - SHOWN);
    }
}

fn evaluate(cli: &Cli, model_path: &Path, strat_path: &Path, steps: Option<usize>) -> Result<bool> {
    let model = load(model_path)?;
    let strategies = read_strategies(strat_path, &model)?;
    let config = SolverConfig::with_steps(steps.unwrap_or(strategies.grid.steps));
    let field = policy_evaluate(&model, &strategies, &config)?;
    print_values_at_0(&model, field.slice(0));
    let mut run = Run::new(&cli.out)?;
    run.write("evaluation.csv", &io::solution_csv_string(&model, &field, None)?)?;
    let cfg = json!({ "strategies": strat_path.display().to_string(), "steps": config.steps });
    run.finish("evaluate", Some(model_path), cfg, None, true)?;
    Ok(true)
}

fn best_response(
    cli: &Cli,
    model_path: &Path,
    strat_path: &Path,
    side: SideArg,
    steps: Option<usize>,
    tol: f64,
) -> Result<bool> {
    let model = load(model_path)?;
    let strategies = read_strategies(strat_path, &model)?;
    let config = SolverConfig {
        steps: steps.unwrap_or(strategies.grid.steps),
        game_tol: tol,
        ..Default::default()
    };
    let free = match side {
        SideArg::Max => Side::Row,
        SideArg::Min => Side::Column,
    };
    let field = best_response_solve(&model, &strategies, free, &config)?;
    print_values_at_0(&model, field.slice(0));
    let mut run = Run::new(&cli.out)?;
    run.write("best_response.csv", &io::solution_csv_string(&model, &field, None)?)?;
    let side_name = match side {
        SideArg::Max => "max",
        SideArg::Min => "min",
    };
    let cfg = json!({
        "strategies": strat_path.display().to_string(),
        "side": side_name,
        "steps": config.steps,
        "tol": tol,
    });
    run.finish("best-response", Some(model_path), cfg, None, true)?;
    Ok(true)
}

fn parse_state(model: &GameModel, s: &str) -> Result<usize> {
    let s = s.trim();
    if let Some(x) = model.states.index_of(s) {
        return Ok(x);
    }
    match s.parse::<usize>() {
        Ok(x) if x < model.n_states() => Ok(x),
        _ => Err(anyhow!(pdmg_core::Error::Validation(format!("unknown state {s:?}")))),
    }
}

fn simulate(
    cli: &Cli,
    model_path: &Path,
    strat_path: &Path,
    t0: f64,
    x0: &str,
    dump: usize,
    config: SimConfig,
) -> Result<bool> {
    let model = load(model_path)?;
    let strategies = read_strategies(strat_path, &model)?;
    let x = parse_state(&model, x0)?;
    let est = estimate_j(&model, &strategies, t0, x, &config)?;
    println!(
        "J({t0}, {}) = {:.10} +- {:.3e} over {} paths (risk value {:.10})",
        model.states.name(x),
        est.mean,
        est.stderr,
        est.n_paths,
        est.mean.ln() / model.lambda
    );
    let mut run = Run::new(&cli.out)?;
    run.write("estimate.json", &io::to_json(&est)?)?;
    if dump > 0 {
        let paths = sample_paths(&model, &strategies, t0, x, dump, &config)?;
        let mut buf = Vec::new();
        io::write_trajectories_csv(&mut buf, &model, &paths)?;
        run.write("trajectories.csv", &String::from_utf8(buf)?)?;
    }
    let cfg = json!({
        "strategies": strat_path.display().to_string(),
        "t0": t0,
        "x0": model.states.name(x),
        "paths": config.n_paths,
        "dump": dump,
        "rate_bound_factor": config.rate_bound_factor,
    });
    run.finish("simulate", Some(model_path), cfg, Some(config.seed), true)?;
    Ok(true)
}

fn verify(
    cli: &Cli,
    model_path: &Path,
    field_path: &Path,
    strat_path: Option<&Path>,
    refine: usize,
    tol: f64,
    check_steps: usize,
) -> Result<bool> {
    let model = load(model_path)?;
    let solution = read_solution(field_path, &model)?;
    let strategies = match strat_path {
        Some(p) => Some(read_strategies(p, &model)?),
        None => solution.strategies.clone(),
    };
    let field = &solution.field;

    let mut report = VerificationReport { checks: vec![check_positivity(field)], passed: true };
    if model.lyapunov.is_some() {
        report = report.merge(check_assumptions(&model, check_steps)?);
        let bounds = check_bounds(field, &model)?;
        // positivity is already recorded
        report = report.merge(VerificationReport {
            checks: bounds.checks.into_iter().filter(|c| c.name != "positivity").collect(),
            passed: true,
        });
    } else {
        println!("assumptions and bounds: skipped (no Lyapunov data)");
    }
    if monotone_expected(&model) {
        report = report.merge(VerificationReport { checks: vec![check_monotone_in_time(field, MONOTONE_SLACK)], passed: true });
    }
    let mut expl = None;
    match &strategies {
        Some(s) if report.get("positivity").is_some_and(|c| c.passed) => {
            let e = exploitability(&model, s, refine, &SolverConfig::default())?;
            let check = Check {
                name: "exploitability".into(),
                passed: e.gap <= tol,
                margin: tol - e.gap,
                worst: Some(model.states.name(e.worst_state)),
                note: Some(format!("gap {:.3e} on {} steps", e.gap, e.eval_steps)),
            };
            report = report.merge(VerificationReport { checks: vec![check], passed: true });
            expl = Some(e);
        }
        Some(_) => println!("exploitability: skipped (field is not positive)"),
        None => println!("exploitability: skipped (no strategies)"),
    }
    print_checks(&report);
    println!("verify: {}", if report.passed { "passed" } else { "FAILED" });

    let mut run = Run::new(&cli.out)?;
    run.write("verify.json", &io::to_json(&json!({ "report": report, "exploitability": expl }))?)?;
    let cfg = json!({
        "field": field_path.display().to_string(),
        "strategies": strat_path.map(|p| p.display().to_string()),
        "refine": refine,
        "tol": tol,
        "check_steps": check_steps,
    });
    run.finish("verify", Some(model_path), cfg, None, report.passed)?;
    Ok(report.passed)
}

fn parse_probe(model: &GameModel, s: &str) -> Result<Probe> {
    let bad = || anyhow!(pdmg_core::Error::Validation(format!("probe {s:?} is not `t,state`")));
    let (t, x) = s.split_once(',').ok_or_else(bad)?;
    let t: f64 = t.trim().parse().map_err(|_| bad())?;
    Ok(Probe { t, state: parse_state(model, x)? })
}

fn ladder(
    cli: &Cli,
    model_path: &Path,
    n_list: &[f64],
    kind: KindArg,
    probes: &[String],
    config: SolverConfig,
) -> Result<bool> {
    let model = load(model_path)?;
    let kind = match kind {
        KindArg::Nonneg => LadderKind::Nonneg,
        KindArg::General => LadderKind::General,
        KindArg::Auto => {
            let nonneg = model.min_cost() >= 0.0 && (0..model.n_states()).all(|x| model.terminal(x) >= 0.0);
            if nonneg && model.lyapunov.is_some() {
                LadderKind::Nonneg
            } else {
                LadderKind::General
            }
        }
    };
    let mut probes: Vec<Probe> = probes.iter().map(|p| parse_probe(&model, p)).collect::<Result<_>>()?;
    if probes.is_empty() {
        probes = (0..model.n_states().min(10)).map(|x| Probe { t: 0.0, state: x }).collect();
    }
    let report = ladder_run(&model, kind, n_list, &probes, &config)?;
    for level in &report.levels {
        match &level.error {
            Some(e) => println!("n = {}: error: {e}", level.n),
            None => {
                let vals: Vec<String> = level.phi_at_probe.iter().map(|v| format!("{v:.10}")).collect();
                println!("n = {}: {}", level.n, vals.join(" "));
            }
        }
    }
    println!(
        "monotone: {} (worst violation {:.3e}), last gap {:.3e}",
        report.monotone_ok, report.worst_violation, report.converged_gap
    );
    let passed = report.passed();
    println!("ladder: {}", if passed { "passed" } else { "FAILED" });
    let mut run = Run::new(&cli.out)?;
    run.write("ladder.json", &io::to_json(&report)?)?;
    let cfg = json!({ "kind": report.kind, "n_list": n_list, "probes": probes, "solver": config });
    run.finish("ladder", Some(model_path), cfg, None, passed)?;
    Ok(passed)
}

fn game(cli: &Cli, matrix_path: &Path, tol: f64) -> Result<bool> {
    let text = read_text(matrix_path)?;
    let g = io::read_matrix_csv(&text).with_context(|| format!("reading {}", matrix_path.display()))?;
    let sol = matrix_game::solve(&g, tol)?;
    println!("value {:.12}, duality gap {:.3e}", sol.value, sol.gap);
    println!("row mixture {:?}", sol.row_mix);
    println!("column mixture {:?}", sol.col_mix);
    let mut run = Run::new(&cli.out)?;
    run.write("game.json", &io::to_json(&sol)?)?;
    let cfg = json!({ "matrix": matrix_path.display().to_string(), "tol": tol });
    run.finish("game", None, cfg, None, true)?;
    Ok(true)
}

fn oracle(cli: &Cli, model_path: &Path, config: SolverConfig, refine: usize, picard: bool) -> Result<bool> {
    let model = load(model_path)?;
    let report = oracle_fine_grid(&model, refine, picard, &config)?;
    println!(
        "max |phi_{} - phi_{}| = {:.3e} (backward)",
        report.coarse_steps, report.fine_steps, report.deviation_backward
    );
    if let Some(d) = report.deviation_picard {
        println!("max |phi_{} - picard_{}| = {:.3e}", report.coarse_steps, report.fine_steps, d);
    }
    let mut run = Run::new(&cli.out)?;
    run.write("oracle.json", &io::to_json(&report)?)?;
    let cfg = json!({ "solver": config, "refine": refine, "picard": picard });
    run.finish("oracle", Some(model_path), cfg, None, true)?;
    Ok(true)
}
