//! Backward solution of the multiplicative Shapley equation
//!
//! ```text
//! -d/dt phi(t, x) - (flow derivative) = sup_mu inf_nu [ lambda c(t,x,mu,nu) phi(t,x)
//!                                                       + sum_y phi(t,y) q(y|t,x,mu,nu) ]
//! phi(T, x) = exp(lambda g(x))
//! ```
//!
//! on a uniform time grid, plus the linear (fixed strategies) and one-sided
//! (best response) versions of the same recursion and a Picard iteration of
//! the integral form.
//!
//! One backward step from `t_{k+1}` to `t_k` integrates each cell along the
//! flow with an exponential factor for a per-state reference rate and the
//! remainder frozen at the next slice. With `phi'(y) = phi_{k+1}(flow(y, dt))`:
//!
//! ```text
//! M(a,b) = e^{beta_x dt} phi'(x) (1 + dt lambda (c(a,b) - chat_x))
//!        + sum_{y != x} q(y|a,b) W(x,y) phi'(y) + (Q_x - q*(a,b)) W(x,x) phi'(x)
//! beta_x = lambda chat_x - Q_x,   W(x,y) = int_0^dt e^{beta_x s} e^{lambda chat_y (dt - s)} ds
//! ```
//!
//! where `chat_x` is the value of the cost matrix game at `x` and `Q_x` the
//! largest exit rate there; the unused part of `Q_x` acts as a fictitious
//! self-jump. Entries stay affine in `(c, q)`, so each cell is an exact
//! matrix game; all weights are positive under the step-size guard; constant
//! slices are preserved when costs vanish; adding `n` to every cost scales a
//! step by exactly `e^{lambda n dt}`; and constant costs, games whose cost
//! value is attained by the reference, and a single jump into a cost-free
//! absorbing state are integrated without error.

use rayon::prelude::*;
use serde::Serialize;

use crate::matrix_game::{self, MatrixGame, Side};
use crate::model::{GameModel, Segment};
use crate::{Error, Result};

/// Exponents beyond this are treated as overflow of `exp`.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub steps: usize,
    pub horizon: f64,
}

impl TimeGrid {
    pub fn new(steps: usize, horizon: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Validation("time grid needs at least one step".into()));
        }
        Ok(TimeGrid { steps, horizon })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.steps as f64
        }
    }

    /// Index of the knot nearest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.steps)
    }
}

/// `phi(t_k, x)` for `k = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub grid: TimeGrid,
    n_states: usize,
    phi: Vec<f64>,
}

impl ValueField {
    pub fn from_slices(grid: TimeGrid, n_states: usize, phi: Vec<f64>) -> Result<Self> {
        if phi.len() != (grid.steps + 1) * n_states {
            return Err(Error::Schema(format!(
                "value field has {} entries, expected {}",
                phi.len(),
                (grid.steps + 1) * n_states
            )));
        }
        Ok(ValueField { grid, n_states, phi })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn at(&self, k: usize, x: usize) -> f64 {
        self.phi[k * self.n_states + x]
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.phi[k * self.n_states..(k + 1) * self.n_states]
    }

    pub fn values(&self) -> &[f64] {
        &self.phi
    }

    /// Largest `|self - other|` over the knots of `self`, reading `other` at
    /// the same times (its grid must be a refinement by an integer factor).
    pub fn max_abs_diff(&self, other: &ValueField) -> Result<f64> {
        let r = other.grid.steps / self.grid.steps;
        if r == 0 || r * self.grid.steps != other.grid.steps || self.n_states != other.n_states {
            return Err(Error::Validation("value fields are not on nested grids".into()));
        }
        let mut worst: f64 = 0.0;
        for k in 0..=self.grid.steps {
            for x in 0..self.n_states {
                worst = worst.max((self.at(k, x) - other.at(k * r, x)).abs());
            }
        }
        Ok(worst)
    }
}

/// Piecewise-constant Markov strategies: `(mu, nu)` on `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyField {
    pub grid: TimeGrid,
    n_states: usize,
    mu: Vec<Vec<f64>>,
    nu: Vec<Vec<f64>>,
}

impl StrategyField {
    pub fn new(grid: TimeGrid, n_states: usize, mu: Vec<Vec<f64>>, nu: Vec<Vec<f64>>) -> Result<Self> {
        let cells = grid.steps * n_states;
        if mu.len() != cells || nu.len() != cells {
            return Err(Error::Schema(format!("strategy field needs {cells} cells per player")));
        }
        Ok(StrategyField { grid, n_states, mu, nu })
    }

    /// The same pair of mixtures at every time.
    pub fn constant(model: &GameModel, steps: usize, mu: impl Fn(usize) -> Vec<f64>, nu: impl Fn(usize) -> Vec<f64>) -> Result<Self> {
        let grid = TimeGrid::new(steps, model.horizon)?;
        let s = model.n_states();
        let field = StrategyField {
            grid,
            n_states: s,
            mu: (0..steps * s).map(|i| mu(i % s)).collect(),
            nu: (0..steps * s).map(|i| nu(i % s)).collect(),
        };
        field.validate(model, crate::model::SIMPLEX_TOL)?;
        Ok(field)
    }

    /// Uniform mixtures everywhere.
    pub fn uniform(model: &GameModel, steps: usize) -> Result<Self> {
        Self::constant(
            model,
            steps,
            |x| vec![1.0 / model.n_p1(x) as f64; model.n_p1(x)],
            |x| vec![1.0 / model.n_p2(x) as f64; model.n_p2(x)],
        )
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn mu(&self, k: usize, x: usize) -> &[f64] {
        &self.mu[k * self.n_states + x]
    }

    pub fn nu(&self, k: usize, x: usize) -> &[f64] {
        &self.nu[k * self.n_states + x]
    }

    /// Interval index containing `t` (the last interval is closed at `T`).
    pub fn index_at(&self, t: f64) -> usize {
        ((t / self.grid.dt()).floor().max(0.0) as usize).min(self.grid.steps - 1)
    }

    /// Interval of this field covering solver step `j` of a grid with
    /// `steps` intervals over the same horizon.
    pub fn index_for_step(&self, j: usize, steps: usize) -> usize {
        (j * self.grid.steps / steps).min(self.grid.steps - 1)
    }

    pub fn validate(&self, model: &GameModel, tol: f64) -> Result<()> {
        if self.n_states != model.n_states() {
            return Err(Error::Schema(format!(
                "strategy field has {} states, model has {}",
                self.n_states,
                model.n_states()
            )));
        }
        if (self.grid.horizon - model.horizon).abs() > 1e-12 * model.horizon {
            return Err(Error::Schema("strategy field horizon differs from the model".into()));
        }
        for k in 0..self.grid.steps {
            for x in 0..self.n_states {
                for (p, len, who) in [(self.mu(k, x), model.n_p1(x), "mu"), (self.nu(k, x), model.n_p2(x), "nu")] {
                    check_tol(p, len, tol).map_err(|e| {
                        Error::Simplex(format!("{who} at step {k}, state {}: {e}", model.states.name(x)))
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Time shift: on steps `k >= s` play what the original plays at
    /// `k + t - s`; before `s` play the original. Steps past the end of the
    /// grid reuse the last interval.
    pub fn time_shift(&self, s: usize, t: usize) -> StrategyField {
        let last = self.grid.steps - 1;
        let src = |k: usize| if k >= s { (k + t - s).min(last) } else { k };
        let pick = |v: &Vec<Vec<f64>>| {
            (0..self.grid.steps * self.n_states)
                .map(|i| v[src(i / self.n_states) * self.n_states + i % self.n_states].clone())
                .collect()
        };
        StrategyField { grid: self.grid, n_states: self.n_states, mu: pick(&self.mu), nu: pick(&self.nu) }
    }

    /// Replaces one player's half with `other`'s.
    pub fn with_half_from(&self, other: &StrategyField, side: Side) -> StrategyField {
        let mut out = self.clone();
        match side {
            Side::Row => out.mu = other.mu.clone(),
            Side::Column => out.nu = other.nu.clone(),
        }
        out
    }
}

fn check_tol(p: &[f64], len: usize, tol: f64) -> std::result::Result<(), String> {
    if p.len() != len {
        return Err(format!("{} entries, expected {len}", p.len()));
    }
    if p.iter().any(|v| !v.is_finite() || *v < -tol) {
        return Err("negative or non-finite entry".into());
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > tol {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    SemiLagrangian,
    Picard,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverConfig {
    pub steps: usize,
    pub scheme: Scheme,
    /// Fixed-point tolerance of the Picard iteration (relative to the
    /// largest value).
    pub tol: f64,
    /// Duality-gap tolerance of each matrix game.
    pub game_tol: f64,
    pub max_picard_iters: usize,
    pub cfl_safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            steps: 1000,
            scheme: Scheme::SemiLagrangian,
            tol: 1e-12,
            game_tol: matrix_game::DEFAULT_TOL,
            max_picard_iters: 500,
            cfl_safety: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn with_steps(steps: usize) -> Self {
        SolverConfig { steps, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.tol > 0.0) || !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::Validation("solver config needs steps >= 1, tol > 0, 0 < cfl_safety <= 1".into()));
        }
        Ok(())
    }
}

/// Step-size guard `dt (lambda max|c| + 2 max q*) <= safety`.
pub fn check_cfl(model: &GameModel, steps: usize, safety: f64) -> Result<()> {
    let speed = model.lambda * model.max_abs_cost() + 2.0 * model.max_q_star();
    let measure = model.horizon / steps as f64 * speed;
    if measure > safety {
        return Err(Error::Cfl {
            measure,
            safety,
            required_steps: (model.horizon * speed / safety).ceil() as usize,
        });
    }
    Ok(())
}

/// `exp(lambda g(x))` for every state.
pub fn terminal_field(model: &GameModel) -> Result<Vec<f64>> {
    model
        .terminal_slice()
        .iter()
        .map(|&g| {
            let e = model.lambda * g;
            if e > MAX_EXPONENT {
                return Err(Error::Overflow { what: "lambda * g".into(), max_exponent: e });
            }
            Ok(e.exp())
        })
        .collect()
}

/// Generator form of the bracket of the optimality equation at `(t, x)`:
/// `lambda c(a,b) phi_self + sum_y q(y|a,b) slice(y)` with the diagonal
/// implied, so constant slices contribute nothing through the jump term.
pub fn local_game_matrix(model: &GameModel, t: f64, x: usize, slice: &[f64], phi_self: f64) -> Result<MatrixGame> {
    let seg = model.segment_at(t);
    let (m, n) = (model.n_p1(x), model.n_p2(x));
    let data = (0..m * n)
        .map(|p| {
            let jumps: f64 = seg.rates(x, p).iter().map(|&(y, r)| r * (slice[y] - slice[x])).sum();
            model.lambda * seg.cost(x, p) * phi_self + jumps
        })
        .collect();
    MatrixGame::new(m, n, data)
}

fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        1.0 + 0.5 * z
    } else {
        z.exp_m1() / z
    }
}

/// Per-state reference data of one segment: cost-game value and largest
/// exit rate.
struct Reference {
    cost: Vec<f64>,
    exit: Vec<f64>,
}

impl Reference {
    fn new(model: &GameModel, seg: &Segment) -> Result<Self> {
        let mut cost = Vec::with_capacity(model.n_states());
        let mut exit = Vec::with_capacity(model.n_states());
        for x in 0..model.n_states() {
            let (m, n) = (model.n_p1(x), model.n_p2(x));
            let table: Vec<f64> = (0..m * n).map(|p| seg.cost(x, p)).collect();
            cost.push(matrix_game::solve(&MatrixGame::new(m, n, table)?, matrix_game::DEFAULT_TOL)?.value);
            exit.push((0..m * n).map(|p| seg.exit_rate(x, p)).fold(0.0, f64::max));
        }
        Ok(Reference { cost, exit })
    }
}

/// One backward step's ingredients: segment data at `t_k` and the next
/// slice composed with the flow over one step.
struct Step<'a> {
    model: &'a GameModel,
    seg: &'a Segment,
    reference: &'a Reference,
    dt: f64,
    next: Vec<f64>,
}

impl<'a> Step<'a> {
    fn new(model: &'a GameModel, references: &'a [Reference], t: f64, dt: f64, next_slice: &[f64]) -> Self {
        let next = (0..model.n_states()).map(|y| next_slice[model.flow(y, dt)]).collect();
        let i = model.segment_index(t);
        Step { model, seg: &model.segments()[i], reference: &references[i], dt, next }
    }

    /// `int_0^dt e^{beta_x s} e^{rho_y (dt - s)} ds`, written so that a
    /// common shift of all costs factors out exactly.
    fn weight(&self, x: usize, y: usize) -> f64 {
        let (lam, dt, r) = (self.model.lambda, self.dt, self.reference);
        let z = (lam * (r.cost[x] - r.cost[y]) - r.exit[x]) * dt;
        (lam * r.cost[y] * dt).exp() * dt * phi1(z)
    }

    fn matrix(&self, x: usize) -> Vec<f64> {
        let (lam, dt, seg, r) = (self.model.lambda, self.dt, self.seg, self.reference);
        let pairs = self.model.n_p1(x) * self.model.n_p2(x);
        let beta = lam * r.cost[x] - r.exit[x];
        let decay = (beta * dt).exp() * self.next[x];
        let self_weight = self.weight(x, x) * self.next[x];
        (0..pairs)
            .map(|p| {
                let mut v = decay * (1.0 + dt * lam * (seg.cost(x, p) - r.cost[x]));
                v += (r.exit[x] - seg.exit_rate(x, p)) * self_weight;
                for &(y, q) in seg.rates(x, p) {
                    v += q * self.weight(x, y) * self.next[y];
                }
                v
            })
            .collect()
    }
}

fn bilinear(m: usize, n: usize, a: &[f64], mu: &[f64], nu: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..m {
        let row: f64 = (0..n).map(|j| a[i * n + j] * nu[j]).sum();
        acc += mu[i] * row;
    }
    acc
}

/// What to do with each cell's matrix.
#[derive(Clone, Copy)]
enum Inner<'a> {
    Game { tol: f64 },
    Fixed(&'a StrategyField),
    /// The free player is `side`; the other half of the field is played.
    Best(Side, &'a StrategyField),
}

struct Cell {
    value: f64,
    mix: Option<(Vec<f64>, Vec<f64>)>,
}

fn solve_cell(model: &GameModel, step: &Step, x: usize, inner: Inner, j: usize, steps: usize) -> Result<Cell> {
    let (m, n) = (model.n_p1(x), model.n_p2(x));
    let a = step.matrix(x);
    Ok(match inner {
        Inner::Game { tol } => {
            let sol = matrix_game::solve(&MatrixGame::new(m, n, a)?, tol)?;
            Cell { value: sol.value, mix: Some((sol.row_mix, sol.col_mix)) }
        }
        Inner::Fixed(s) => {
            let k = s.index_for_step(j, steps);
            Cell { value: bilinear(m, n, &a, s.mu(k, x), s.nu(k, x)), mix: None }
        }
        Inner::Best(side, s) => {
            let k = s.index_for_step(j, steps);
            let game = MatrixGame::new(m, n, a)?;
            let value = match side {
                Side::Row => game.row_payoffs(s.nu(k, x)).into_iter().fold(f64::NEG_INFINITY, f64::max),
                Side::Column => game.col_payoffs(s.mu(k, x)).into_iter().fold(f64::INFINITY, f64::min),
            };
            Cell { value, mix: None }
        }
    })
}

fn check_slice(step: usize, slice: &[f64]) -> Result<()> {
    for (x, &v) in slice.iter().enumerate() {
        if v.is_infinite() {
            return Err(Error::Overflow { what: format!("phi at step {step}, state {x}"), max_exponent: v });
        }
        if !(v > 0.0) {
            return Err(Error::Positivity { step, state: x, value: v });
        }
    }
    Ok(())
}

/// Runs the recursion over steps `end-1, ..., 0` of a grid with `steps`
/// intervals on `[0, T]`, starting from `exp(lambda g)` at knot `end`.
fn backward_pass(
    model: &GameModel,
    steps: usize,
    end: usize,
    cfl_safety: f64,
    inner: Inner,
) -> Result<(ValueField, Option<StrategyField>)> {
    check_cfl(model, steps, cfl_safety)?;
    let full = TimeGrid::new(steps, model.horizon)?;
    let dt = full.dt();
    if !model.is_step_aligned(dt) {
        log::warn!("grid flow does not move a whole number of cells per step (dt = {dt}); flow lookups are rounded");
    }
    let s = model.n_states();
    let mut phi = vec![0.0; (end + 1) * s];
    phi[end * s..].copy_from_slice(&terminal_field(model)?);
    let keep_mix = matches!(inner, Inner::Game { .. });
    let mut mu = vec![Vec::new(); if keep_mix { end * s } else { 0 }];
    let mut nu = mu.clone();
    let references: Vec<Reference> =
        model.segments().iter().map(|seg| Reference::new(model, seg)).collect::<Result<_>>()?;
    for k in (0..end).rev() {
        let step = Step::new(model, &references, full.t(k), dt, &phi[(k + 1) * s..(k + 2) * s]);
        let cells: Vec<Cell> = (0..s)
            .into_par_iter()
            .with_min_len(16)
            .map(|x| solve_cell(model, &step, x, inner, k, steps))
            .collect::<Result<_>>()?;
        for (x, cell) in cells.into_iter().enumerate() {
            phi[k * s + x] = cell.value;
            if let Some((a, b)) = cell.mix {
                mu[k * s + x] = a;
                nu[k * s + x] = b;
            }
        }
        check_slice(k, &phi[k * s..(k + 1) * s])?;
    }
    let grid = TimeGrid { steps: end, horizon: full.t(end) };
    let strategies = keep_mix.then_some(StrategyField { grid, n_states: s, mu, nu });
    Ok((ValueField { grid, n_states: s, phi }, strategies))
}

/// Value and saddle-point strategies of the discretized game.
pub fn backward_solve(model: &GameModel, config: &SolverConfig) -> Result<(ValueField, StrategyField)> {
    config.validate()?;
    let (v, s) = backward_pass(
        model,
        config.steps,
        config.steps,
        config.cfl_safety,
        Inner::Game { tol: config.game_tol },
    )?;
    Ok((v, s.expect("game pass keeps strategies")))
}

fn check_strategies(model: &GameModel, strategies: &StrategyField) -> Result<()> {
    strategies.validate(model, 1e-9)
}

/// Multiplicative value of a fixed strategy pair on a grid of
/// `config.steps` intervals (the strategy grid may differ).
pub fn policy_evaluate(model: &GameModel, strategies: &StrategyField, config: &SolverConfig) -> Result<ValueField> {
    config.validate()?;
    check_strategies(model, strategies)?;
    Ok(backward_pass(model, config.steps, config.steps, config.cfl_safety, Inner::Fixed(strategies))?.0)
}

/// Like [`policy_evaluate`] but with the terminal condition placed at knot
/// `end` of the `config.steps` grid; meaningful for time-homogeneous models.
pub fn policy_evaluate_until(
    model: &GameModel,
    strategies: &StrategyField,
    end: usize,
    config: &SolverConfig,
) -> Result<ValueField> {
    config.validate()?;
    check_strategies(model, strategies)?;
    if end == 0 || end > config.steps {
        return Err(Error::Validation(format!("end knot {end} outside 1..={}", config.steps)));
    }
    Ok(backward_pass(model, config.steps, end, config.cfl_safety, Inner::Fixed(strategies))?.0)
}

/// Best response of the `free` player against the other half of `fixed`:
/// `sup_mu J(mu, nu_fixed)` for `Side::Row`, `inf_nu J(mu_fixed, nu)` for
/// `Side::Column`.
pub fn best_response_solve(
    model: &GameModel,
    fixed: &StrategyField,
    free: Side,
    config: &SolverConfig,
) -> Result<ValueField> {
    config.validate()?;
    check_strategies(model, fixed)?;
    Ok(backward_pass(model, config.steps, config.steps, config.cfl_safety, Inner::Best(free, fixed))?.0)
}

/// Risk value (certainty equivalent) `ln(phi) / lambda`.
pub fn to_risk_value(field: &ValueField, lambda: f64) -> Result<Vec<f64>> {
    field
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if !(v > 0.0) {
                let s = field.n_states;
                return Err(Error::Positivity { step: i / s, state: i % s, value: v });
            }
            Ok(v.ln() / lambda)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardReport {
    pub sweeps: usize,
    /// `sup |u_{i+1} - u_i|` for each sweep.
    pub residuals: Vec<f64>,
    /// `L = 2 max q* + max |c|`.
    pub lipschitz: f64,
    /// Smallest `m` with `(L T)^m / m! < 1`.
    pub m: usize,
    pub factor_bound: f64,
    /// Largest observed `residual[i + m] / residual[i]` over sweeps whose
    /// residual is well above rounding level.
    pub empirical_factor: Option<f64>,
}

/// `(L T)^m / m!`.
pub fn contraction_bound(lt: f64, m: usize) -> f64 {
    (1..=m).fold(1.0, |acc, i| acc * lt / i as f64)
}

/// The discretized integral operator
///
/// ```text
/// (G u)(t_k, x) = exp(lambda g(flow(x, T - t_k)))
///               + dt * sum_{j >= k} w_j val[lambda c u + sum_y q u](t_j, flow(x, t_j - t_k))
/// ```
///
/// with trapezoidal weights (`w_k = w_n = 1/2`, else 1), acting on fields
/// stored like [`ValueField`].
pub struct Gamma<'a> {
    model: &'a GameModel,
    grid: TimeGrid,
    base: Vec<f64>,
    chain: bool,
    game_tol: f64,
}

impl<'a> Gamma<'a> {
    pub fn new(model: &'a GameModel, steps: usize, game_tol: f64) -> Result<Self> {
        let grid = TimeGrid::new(steps, model.horizon)?;
        let (n, s, dt) = (grid.steps, model.n_states(), grid.dt());
        let terminal = terminal_field(model)?;
        let mut base = vec![0.0; (n + 1) * s];
        for k in 0..=n {
            for x in 0..s {
                base[k * s + x] = terminal[model.flow(x, (n - k) as f64 * dt)];
            }
        }
        let chain = model.states.composes_over(dt);
        Ok(Gamma { model, grid, base, chain, game_tol })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    /// The terminal term alone, `G` applied to anything when `c = q = 0`.
    pub fn terminal_term(&self) -> &[f64] {
        &self.base
    }

    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let (model, grid) = (self.model, self.grid);
        let (n, s, dt) = (grid.steps, model.n_states(), grid.dt());
        // h[j][y] for j = 0..=n
        let h: Vec<Vec<f64>> = (0..=n)
            .into_par_iter()
            .map(|j| {
                let slice = &u[j * s..(j + 1) * s];
                (0..s)
                    .map(|y| {
                        let g = local_game_matrix(model, grid.t(j), y, slice, slice[y])?;
                        Ok(matrix_game::solve(&g, self.game_tol)?.value)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let mut next = self.base.clone();
        if self.chain {
            // acc_k(x) = sum_{j > k} h_j(flow(x, t_j - t_k)), built by stepping
            // along the flow one interval at a time; the endpoint terms are
            // then halved
            let mut acc = vec![0.0; s];
            for k in (0..n).rev() {
                let prev = acc.clone();
                for x in 0..s {
                    let y = model.flow(x, dt);
                    acc[x] = h[k + 1][y] + prev[y];
                    let last = h[n][model.flow(x, (n - k) as f64 * dt)];
                    next[k * s + x] += dt * (acc[x] + 0.5 * (h[k][x] - last));
                }
            }
        } else {
            next.par_chunks_mut(s).enumerate().take(n).for_each(|(k, row)| {
                for (x, out) in row.iter_mut().enumerate() {
                    let inner: f64 = (k + 1..n).map(|j| h[j][model.flow(x, (j - k) as f64 * dt)]).sum();
                    let ends = 0.5 * (h[k][x] + h[n][model.flow(x, (n - k) as f64 * dt)]);
                    *out += dt * (inner + ends);
                }
            });
        }
        Ok(next)
    }
}

/// `L = 2 max q* + max |c|`, the Lipschitz constant in the contraction
/// estimate of the integral operator.
pub fn gamma_lipschitz(model: &GameModel) -> f64 {
    2.0 * model.max_q_star() + model.max_abs_cost()
}

/// Fixed point of [`Gamma`], iterated from its terminal term until the sup
/// change falls below `config.tol` times the largest value.
pub fn picard_solve(model: &GameModel, config: &SolverConfig) -> Result<(ValueField, PicardReport)> {
    config.validate()?;
    let gamma = Gamma::new(model, config.steps, config.game_tol)?;
    let s = model.n_states();
    let mut u = gamma.terminal_term().to_vec();
    let lipschitz = gamma_lipschitz(model);
    let lt = lipschitz * model.horizon;
    let m = (1..=400).find(|&m| contraction_bound(lt, m) < 1.0).unwrap_or(400);
    let mut residuals = Vec::new();

    for sweep in 0..config.max_picard_iters {
        let next = gamma.apply(&u)?;
        let residual = next.iter().zip(&u).fold(0.0f64, |r, (a, b)| r.max((a - b).abs()));
        let scale = next.iter().fold(1.0f64, |r, v| r.max(v.abs()));
        u = next;
        residuals.push(residual);
        if residual <= config.tol * scale {
            let field = ValueField { grid: gamma.grid(), n_states: s, phi: u };
            check_slice(0, field.slice(0))?;
            let empirical_factor = empirical_factor(&residuals, m, scale);
            return Ok((
                field,
                PicardReport {
                    sweeps: sweep + 1,
                    residuals,
                    lipschitz,
                    m,
                    factor_bound: contraction_bound(lt, m),
                    empirical_factor,
                },
            ));
        }
    }
    Err(Error::PicardDiverged {
        iterations: config.max_picard_iters,
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

fn empirical_factor(residuals: &[f64], m: usize, scale: f64) -> Option<f64> {
    let floor = 1e-9 * scale;
    (0..residuals.len().saturating_sub(m))
        .filter(|&i| residuals[i] > floor)
        .map(|i| residuals[i + m] / residuals[i])
        .reduce(f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;

    fn pennies(lambda: f64) -> GameModel {
        let mut b = ModelBuilder::finite(&["s"], lambda, 1.0);
        b.action_counts(0, 2, 2).unwrap();
        for (a, bb, c) in [(0, 0, 1.0), (0, 1, -1.0), (1, 0, -1.0), (1, 1, 1.0)] {
            b.cost(0, a, bb, c).unwrap();
        }
        b.build().unwrap()
    }

    fn constant_cost(lambda: f64, c: f64) -> GameModel {
        let mut b = ModelBuilder::finite(&["s"], lambda, 1.0);
        b.cost(0, 0, 0, c).unwrap();
        b.build().unwrap()
    }

    fn uncontrolled() -> GameModel {
        let mut b = ModelBuilder::finite(&["1", "2"], 1.0, 1.0);
        b.rate(0, 0, 0, 1, 1.0).unwrap();
        b.cost(0, 0, 0, 1.0).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn terminal_examples() {
        let mut b = ModelBuilder::finite(&["a", "b"], 1.0, 1.0);
        b.terminal(1, 2f64.ln()).unwrap();
        let t = terminal_field(&b.build().unwrap()).unwrap();
        assert_eq!(t[0], 1.0);
        assert!((t[1] - 2.0).abs() < 1e-15);
        let mut b = ModelBuilder::finite(&["a"], 0.5, 1.0);
        b.terminal(0, 2.0).unwrap();
        assert!((terminal_field(&b.build().unwrap()).unwrap()[0] - std::f64::consts::E).abs() < 1e-15);
        let mut b = ModelBuilder::finite(&["a"], 1.0, 1.0);
        b.terminal(0, 800.0).unwrap();
        assert!(matches!(terminal_field(&b.build().unwrap()), Err(Error::Overflow { .. })));
    }

    #[test]
    fn local_matrix_examples() {
        let g = local_game_matrix(&pennies(0.5), 0.0, 0, &[1.0], 1.0).unwrap();
        assert_eq!((g.get(0, 0), g.get(0, 1), g.get(1, 0), g.get(1, 1)), (0.5, -0.5, -0.5, 0.5));
        let mut b = ModelBuilder::finite(&["1", "2"], 1.0, 1.0);
        b.rate(0, 0, 0, 1, 1.0).unwrap();
        let g = local_game_matrix(&b.build().unwrap(), 0.0, 0, &[1.0, 1.0], 1.0).unwrap();
        assert_eq!(g.get(0, 0), 0.0);
        let g = local_game_matrix(&constant_cost(1.0, 1.0), 0.0, 0, &[7.0], 3.0).unwrap();
        assert_eq!(g.get(0, 0), 3.0);
    }

    #[test]
    fn constant_cost_matches_exponential() {
        let (v, _) = backward_solve(&constant_cost(0.5, 2.0), &SolverConfig::with_steps(1000)).unwrap();
        assert!((v.at(0, 0) - std::f64::consts::E).abs() < 1e-6);
        assert_eq!(v.at(1000, 0), 1.0);
    }

    #[test]
    fn matching_pennies_value_is_one() {
        let (v, s) = backward_solve(&pennies(1.0), &SolverConfig::with_steps(50)).unwrap();
        for k in 0..=50 {
            assert!((v.at(k, 0) - 1.0).abs() < 1e-12);
        }
        for k in 0..50 {
            assert!(s.mu(k, 0).iter().all(|p| (p - 0.5).abs() < 1e-9));
            assert!(s.nu(k, 0).iter().all(|p| (p - 0.5).abs() < 1e-9));
        }
    }

    #[test]
    fn uncontrolled_benchmark_is_two() {
        let m = uncontrolled();
        let s = StrategyField::uniform(&m, 10).unwrap();
        let v = policy_evaluate(&m, &s, &SolverConfig::with_steps(2000)).unwrap();
        assert!((v.at(0, 0) - 2.0).abs() < 1e-4, "{}", v.at(0, 0));
        assert!((v.at(0, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn best_response_against_pure_heads() {
        // the minimizer answers Heads with Tails: phi = e^{-1}, risk value -1,
        // approached at first order in dt
        let m = pennies(1.0);
        let heads = StrategyField::constant(&m, 10, |_| vec![1.0, 0.0], |_| vec![0.5, 0.5]).unwrap();
        let err = |n: usize| {
            let v = best_response_solve(&m, &heads, Side::Column, &SolverConfig::with_steps(n)).unwrap();
            (to_risk_value(&v, 1.0).unwrap()[0] + 1.0).abs()
        };
        let (e1, e2) = (err(1000), err(2000));
        assert!(e1 < 1e-3, "{e1}");
        assert!((e1 / e2 - 2.0).abs() < 0.05);
    }

    #[test]
    fn best_response_in_uncontrolled_model_is_evaluation() {
        let m = uncontrolled();
        let s = StrategyField::uniform(&m, 20).unwrap();
        let cfg = SolverConfig::with_steps(200);
        let e = policy_evaluate(&m, &s, &cfg).unwrap();
        for side in [Side::Row, Side::Column] {
            assert_eq!(best_response_solve(&m, &s, side, &cfg).unwrap(), e);
        }
    }

    #[test]
    fn risk_value_examples() {
        let g = TimeGrid::new(1, 1.0).unwrap();
        let f = ValueField::from_slices(g, 1, vec![2.0, 1.0]).unwrap();
        let r = to_risk_value(&f, 1.0).unwrap();
        assert!((r[0] - std::f64::consts::LN_2).abs() < 1e-12 && r[1] == 0.0);
        let f = ValueField::from_slices(g, 1, vec![std::f64::consts::E, 1.0]).unwrap();
        assert!((to_risk_value(&f, 0.5).unwrap()[0] - 2.0).abs() < 1e-15);
        let f = ValueField::from_slices(g, 1, vec![0.0, 1.0]).unwrap();
        assert!(to_risk_value(&f, 1.0).is_err());
    }

    #[test]
    fn cfl_guard_reports_required_steps() {
        let mut b = ModelBuilder::finite(&["1", "2"], 1.0, 1.0);
        b.rate(0, 0, 0, 1, 10.0).unwrap();
        let m = b.build().unwrap();
        match backward_solve(&m, &SolverConfig::with_steps(10)) {
            Err(Error::Cfl { required_steps, .. }) => assert_eq!(required_steps, 40),
            other => panic!("expected CFL error, got {other:?}"),
        }
    }

    #[test]
    fn picard_trivial_and_pennies() {
        let m = ModelBuilder::finite(&["s"], 1.0, 1.0).build().unwrap();
        let (v, r) = picard_solve(&m, &SolverConfig::with_steps(10)).unwrap();
        assert_eq!(r.sweeps, 1);
        assert!(v.values().iter().all(|&p| p == 1.0));
        let (v, _) = picard_solve(&pennies(1.0), &SolverConfig::with_steps(10)).unwrap();
        assert!(v.values().iter().all(|&p| (p - 1.0).abs() < 1e-12));
    }

    #[test]
    fn contraction_bound_arithmetic() {
        assert!((contraction_bound(3.0, 7) - 2187.0 / 5040.0).abs() < 1e-15);
    }

    #[test]
    fn picard_agrees_with_backward_on_uncontrolled() {
        let m = uncontrolled();
        let cfg = SolverConfig::with_steps(400);
        let (p, rep) = picard_solve(&m, &cfg).unwrap();
        let (b, _) = backward_solve(&m, &cfg).unwrap();
        assert!(p.max_abs_diff(&b).unwrap() < 1e-2);
        if let Some(f) = rep.empirical_factor {
            assert!(f <= rep.factor_bound + 1e-6);
        }
    }

    #[test]
    fn time_shift_window_matches() {
        // time-homogeneous: evaluating the shifted field on [s, s + N - t]
        // reproduces the original evaluation on [t, N]
        let mut b = ModelBuilder::finite(&["a", "b"], 1.0, 1.0);
        b.action_counts(0, 2, 2).unwrap();
        b.rate(0, 0, 1, 1, 1.0).unwrap();
        b.rate(1, 0, 0, 0, 0.5).unwrap();
        b.cost(0, 1, 0, 1.0).unwrap();
        b.cost(1, 0, 0, 0.3).unwrap();
        let m = b.build().unwrap();
        let cfg = SolverConfig::with_steps(100);
        let (_, strat) = backward_solve(&m, &cfg).unwrap();
        let full = policy_evaluate(&m, &strat, &cfg).unwrap();
        let (s, t) = (10, 30);
        let shifted = strat.time_shift(s, t);
        let window = policy_evaluate_until(&m, &shifted, s + 100 - t, &cfg).unwrap();
        for x in 0..2 {
            assert!((window.at(s, x) - full.at(t, x)).abs() < 1e-12);
        }
    }
}
