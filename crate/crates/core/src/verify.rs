//! Checks of the standing assumptions on a concrete model and
//! certification of solver output: value bounds, monotonicity in time,
//! exploitability of a strategy pair, a fine-grid oracle and the contraction
//! estimate of the integral operator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::matrix_game::Side;
use crate::model::{GameModel, LyapunovData};
use crate::shapley::{
    backward_solve, best_response_solve, contraction_bound, gamma_lipschitz, picard_solve, policy_evaluate,
    to_risk_value, Gamma, SolverConfig, StrategyField, TimeGrid, ValueField,
};
use crate::simulate::MCEstimate;
use crate::{Error, Result};

/// Slack for inequalities checked in floating point.
pub const CHECK_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Smallest `rhs - lhs` over everything checked (negative on failure).
    pub margin: f64,
    /// Where the smallest margin occurred.
    pub worst: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerificationReport {
    fn from_checks(checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        VerificationReport { checks, passed }
    }

    pub fn merge(mut self, other: VerificationReport) -> Self {
        self.checks.extend(other.checks);
        self.passed = self.checks.iter().all(|c| c.passed);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Tracks the tightest `rhs - lhs` of a family of inequalities.
struct Margin {
    name: &'static str,
    worst: f64,
    at: Option<String>,
    slack: f64,
}

impl Margin {
    fn new(name: &'static str, slack: f64) -> Self {
        Margin { name, worst: f64::INFINITY, at: None, slack }
    }

    fn record(&mut self, margin: f64, at: impl FnOnce() -> String) {
        // NaN compares false and is kept as a failure
        if !(margin >= self.worst) {
            self.worst = margin;
            self.at = Some(at());
        }
    }

    fn finish(self) -> Check {
        let passed = self.worst >= -self.slack;
        Check { name: self.name.into(), passed, margin: self.worst, worst: self.at, note: None }
    }
}

fn lyapunov(model: &GameModel) -> Result<&LyapunovData> {
    model.lyapunov.as_ref().ok_or(Error::MissingLyapunov)
}

fn pair_label(model: &GameModel, t: f64, x: usize, a: usize, b: usize) -> String {
    format!(
        "t={t}, x={}, a={}, b={}",
        model.states.name(x),
        model.p1_labels(x)[a],
        model.p2_labels(x)[b]
    )
}

/// The drift, growth and intensity conditions on a grid of `steps`
/// intervals, over every state and action pair. Growth conditions are
/// compared in the log domain.
pub fn check_assumptions(model: &GameModel, steps: usize) -> Result<VerificationReport> {
    let ly = lyapunov(model)?;
    let grid = TimeGrid::new(steps, model.horizon)?;
    let horizon = model.horizon;
    let s = model.n_states();
    // V and V1^2 along the flow at every grid time, row j for time t_j
    let mut v_flow = Vec::with_capacity((steps + 1) * s);
    let mut v1_sq_flow = Vec::with_capacity((steps + 1) * s);
    for j in 0..=steps {
        for y in 0..s {
            let z = model.flow(y, grid.t(j));
            v_flow.push(ly.v[z]);
            v1_sq_flow.push(ly.v1[z].powi(2));
        }
    }
    let growth = 2.0 * (horizon + 1.0);

    let mut drift = Margin::new("drift", CHECK_SLACK);
    let mut cost = Margin::new("cost_growth", CHECK_SLACK);
    let mut terminal = Margin::new("terminal_growth", CHECK_SLACK);
    let mut intensity = Margin::new("intensity", CHECK_SLACK);
    let mut v1_drift = Margin::new("v1_drift", CHECK_SLACK);
    let mut v_squared = Margin::new("v_squared", CHECK_SLACK);

    for k in 0..=steps {
        let t = grid.t(k);
        let seg = model.segment_at(t);
        // V(flow(x, T - t)) sits in row steps - k
        let v_left = &v_flow[(steps - k) * s..(steps - k + 1) * s];
        for x in 0..s {
            let nb = model.n_p2(x);
            for a in 0..model.n_p1(x) {
                for b in 0..nb {
                    let pair = a * nb + b;
                    let (jumps, exit) = (seg.rates(x, pair), seg.exit_rate(x, pair));
                    let at = || pair_label(model, t, x, a, b);
                    // the flow time u runs over the grid, and over [0, T - t]
                    // for the V1 condition
                    for j in 0..=steps {
                        let u = grid.t(j);
                        let (vf, v1f) = (&v_flow[j * s..(j + 1) * s], &v1_sq_flow[j * s..(j + 1) * s]);
                        let lhs = jumps.iter().map(|&(y, r)| r * vf[y]).sum::<f64>() - exit * vf[x];
                        drift.record(ly.rho1 * vf[x] + ly.b1 - lhs, || format!("{}, flow time {u}", at()));
                        if k + j <= steps {
                            let lhs = jumps.iter().map(|&(y, r)| r * v1f[y]).sum::<f64>() - exit * v1f[x];
                            v1_drift.record(ly.rho2 * v1f[x] + ly.b2 - lhs, || format!("{}, flow time {u}", at()));
                        }
                    }
                    let log_cap = (ly.m2 * v_left[x]).ln();
                    cost.record(log_cap - growth * seg.cost(x, pair).abs(), at);
                    intensity.record(ly.kappa * v_left[x] - exit, at);
                }
            }
        }
    }
    for x in 0..s {
        let log_cap = (ly.m2 * ly.v[x]).ln();
        terminal.record(log_cap - growth * model.terminal(x).abs(), || model.states.name(x));
        v_squared.record(ly.m3 * ly.v1[x] - ly.v[x].powi(2), || model.states.name(x));
    }
    Ok(VerificationReport::from_checks(vec![
        drift.finish(),
        cost.finish(),
        terminal.finish(),
        intensity.finish(),
        v1_drift.finish(),
        v_squared.finish(),
    ]))
}

/// `phi > 0` everywhere; needs no Lyapunov data.
pub fn check_positivity(field: &ValueField) -> Check {
    let mut m = Margin::new("positivity", 0.0);
    for k in 0..=field.grid.steps {
        for x in 0..field.n_states() {
            let p = field.at(k, x);
            let margin = if p.is_nan() { f64::NEG_INFINITY } else { p };
            m.record(margin, || format!("step {k}, state {x}"));
        }
    }
    let mut c = m.finish();
    c.passed = c.margin > 0.0;
    c
}

/// Pointwise `exp(-lambda L V(flow(x, T - t))) <= phi(t, x) <= L V(flow(x, T - t))`
/// with `L = M2 e^{rho1 (T - t)} (1 + b1/rho1)`, after a positivity check.
pub fn check_bounds(field: &ValueField, model: &GameModel) -> Result<VerificationReport> {
    let ly = lyapunov(model)?;
    if field.n_states() != model.n_states() {
        return Err(Error::Schema("field and model have different state counts".into()));
    }
    let pos = check_positivity(field);
    if !pos.passed {
        return Ok(VerificationReport::from_checks(vec![pos]));
    }
    let mut lower = Margin::new("lower_bound", CHECK_SLACK);
    let mut upper = Margin::new("upper_bound", CHECK_SLACK);
    for k in 0..=field.grid.steps {
        let t = field.grid.t(k);
        let left = model.horizon - t;
        let l2 = ly.bound_constant(left);
        for x in 0..model.n_states() {
            let vx = ly.v[model.flow(x, left)];
            let p = field.at(k, x);
            let at = || format!("step {k}, state {}", model.states.name(x));
            // relative margins, so that large values do not hide the slack
            lower.record((p - (-model.lambda * l2 * vx).exp()) / p, at);
            upper.record((l2 * vx - p) / p.max(1.0), at);
        }
    }
    Ok(VerificationReport::from_checks(vec![pos, lower.finish(), upper.finish()]))
}

/// The same sandwich for a Monte Carlo mean started at `(0, x0)`, allowing
/// three standard errors.
pub fn check_mc_bounds(model: &GameModel, x0: usize, est: &MCEstimate) -> Result<VerificationReport> {
    let ly = lyapunov(model)?;
    let l1 = ly.bound_constant(model.horizon);
    let vx = ly.v[model.flow(x0, model.horizon)];
    let allowance = 3.0 * est.stderr;
    let mut lower = Margin::new("mc_lower_bound", CHECK_SLACK);
    let mut upper = Margin::new("mc_upper_bound", CHECK_SLACK);
    let at = || model.states.name(x0);
    lower.record(est.mean + allowance - (-model.lambda * l1 * vx).exp(), at);
    upper.record(l1 * vx - (est.mean - allowance), at);
    Ok(VerificationReport::from_checks(vec![lower.finish(), upper.finish()]))
}

/// `phi(t_k, x) >= phi(t_{k+1}, x) - slack` everywhere. The property is
/// expected for time-homogeneous models with `c >= 0` and `g = 0`; a
/// nonconstant terminal payoff can break it near the horizon.
pub fn check_monotone_in_time(field: &ValueField, slack: f64) -> Check {
    let mut m = Margin::new("monotone_in_time", slack);
    for k in 0..field.grid.steps {
        for x in 0..field.n_states() {
            m.record(field.at(k, x) - field.at(k + 1, x), || format!("step {k}, state {x}"));
        }
    }
    m.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Exploitability {
    /// `max_x max(BR_max - J, J - BR_min)` at `t = 0`, in risk-value units.
    pub gap: f64,
    pub worst_state: usize,
    pub eval_steps: usize,
    pub value: Vec<f64>,
    pub best_max: Vec<f64>,
    pub best_min: Vec<f64>,
}

/// Exploitability of a strategy pair. The pair and both one-sided best
/// responses are evaluated on a grid `refine` times finer than the strategy
/// grid; on the strategy grid itself a computed saddle is unexploitable by
/// construction.
pub fn exploitability(
    model: &GameModel,
    strategies: &StrategyField,
    refine: usize,
    config: &SolverConfig,
) -> Result<Exploitability> {
    if refine == 0 {
        return Err(Error::Validation("refine must be >= 1".into()));
    }
    let cfg = SolverConfig { steps: strategies.grid.steps * refine, ..config.clone() };
    let lam = model.lambda;
    let risk0 = |f: &ValueField| -> Result<Vec<f64>> {
        Ok(to_risk_value(f, lam)?[..model.n_states()].to_vec())
    };
    let value = risk0(&policy_evaluate(model, strategies, &cfg)?)?;
    let best_max = risk0(&best_response_solve(model, strategies, Side::Row, &cfg)?)?;
    let best_min = risk0(&best_response_solve(model, strategies, Side::Column, &cfg)?)?;
    let mut gap = 0.0;
    let mut worst_state = 0;
    for x in 0..model.n_states() {
        let g = (best_max[x] - value[x]).max(value[x] - best_min[x]).max(0.0);
        if g > gap {
            gap = g;
            worst_state = x;
        }
    }
    Ok(Exploitability { gap, worst_state, eval_steps: cfg.steps, value, best_max, best_min })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub coarse_steps: usize,
    pub fine_steps: usize,
    /// Max over coarse knots and states of `|coarse - fine backward solve|`.
    pub deviation_backward: f64,
    /// The same against the fine Picard fixed point, when computed.
    pub deviation_picard: Option<f64>,
    pub coarse_at_0: Vec<f64>,
    pub fine_backward_at_0: Vec<f64>,
    pub fine_picard_at_0: Option<Vec<f64>>,
}

/// Re-solves with `refine` times more steps by backward induction and, if
/// `with_picard`, by Picard iteration, and compares with the coarse solve.
pub fn oracle_fine_grid(
    model: &GameModel,
    refine: usize,
    with_picard: bool,
    config: &SolverConfig,
) -> Result<OracleReport> {
    if refine < 2 {
        return Err(Error::Validation("refine factor must be >= 2".into()));
    }
    let (coarse, _) = backward_solve(model, config)?;
    let fine_cfg = SolverConfig { steps: config.steps * refine, ..config.clone() };
    let (fine, _) = backward_solve(model, &fine_cfg)?;
    let picard = if with_picard { Some(picard_solve(model, &fine_cfg)?.0) } else { None };
    Ok(OracleReport {
        coarse_steps: config.steps,
        fine_steps: fine_cfg.steps,
        deviation_backward: coarse.max_abs_diff(&fine)?,
        deviation_picard: picard.as_ref().map(|p| coarse.max_abs_diff(p)).transpose()?,
        coarse_at_0: coarse.slice(0).to_vec(),
        fine_backward_at_0: fine.slice(0).to_vec(),
        fine_picard_at_0: picard.map(|p| p.slice(0).to_vec()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub m: usize,
    pub empirical_factor: f64,
    pub theoretical_bound: f64,
    pub passed: bool,
}

/// `|G^m g1 - G^m g2| / |g1 - g2|` in sup norm for two random fields with
/// values in `[1/2, 2]`, against `((2|q| + |c|) T)^m / m!`.
pub fn contraction_check(model: &GameModel, m: usize, seed: u64, config: &SolverConfig) -> Result<ContractionReport> {
    let gamma = Gamma::new(model, config.steps, config.game_tol)?;
    let len = gamma.terminal_term().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g1: Vec<f64> = (0..len).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut g2: Vec<f64> = (0..len).map(|_| rng.random_range(0.5..2.0)).collect();
    let sup = |a: &[f64], b: &[f64]| a.iter().zip(b).fold(0.0f64, |r, (x, y)| r.max((x - y).abs()));
    let initial = sup(&g1, &g2);
    for _ in 0..m {
        g1 = gamma.apply(&g1)?;
        g2 = gamma.apply(&g2)?;
    }
    let empirical_factor = if initial > 0.0 { sup(&g1, &g2) / initial } else { 0.0 };
    let theoretical_bound = contraction_bound(gamma_lipschitz(model) * model.horizon, m);
    Ok(ContractionReport {
        m,
        empirical_factor,
        theoretical_bound,
        passed: empirical_factor <= theoretical_bound + 1e-6,
    })
}
