//! Problem instances: state space and flow, actions, rate kernel, costs,
//! terminal payoff and optional Lyapunov data.

mod load;
mod space;

pub use load::{load_model, load_model_file};
pub use space::{Boundary, GridFlow, Mode, StateSpace};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::{Error, Result};

/// Tolerance used when checking that a mixed action is a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovData {
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    #[serde(rename = "V1")]
    pub v1: Vec<f64>,
    pub rho1: f64,
    pub b1: f64,
    #[serde(rename = "M1")]
    pub m1: f64,
    #[serde(rename = "M2")]
    pub m2: f64,
    pub kappa: f64,
    pub rho2: f64,
    #[serde(rename = "M3")]
    pub m3: f64,
    pub b2: f64,
}

impl LyapunovData {
    /// Upper-bound constant `M2 e^{rho1 s} (1 + b1/rho1)` for `s` time units
    /// left to the horizon.
    pub fn bound_constant(&self, time_left: f64) -> f64 {
        self.m2 * (self.rho1 * time_left).exp() * (1.0 + self.b1 / self.rho1)
    }

    fn validate(&self, n_states: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("lyapunov: {what}")));
        if self.v.len() != n_states || self.v1.len() != n_states {
            return bad("V and V1 need one entry per state");
        }
        if self.v.iter().chain(&self.v1).any(|&x| !(x.is_finite() && x >= 1.0)) {
            return bad("V and V1 must be finite and >= 1");
        }
        let ranges = [
            ("rho1 must be > 0", self.rho1 > 0.0),
            ("b1 must be >= 0", self.b1 >= 0.0),
            ("M1 must be >= 1", self.m1 >= 1.0),
            ("M2 must be >= 1", self.m2 >= 1.0),
            ("kappa must be > 0", self.kappa > 0.0),
            ("rho2 must be > 0", self.rho2 > 0.0),
            ("M3 must be >= 1", self.m3 >= 1.0),
            ("b2 must be > 0", self.b2 > 0.0),
        ];
        for (msg, ok) in ranges {
            if !ok {
                return bad(msg);
            }
        }
        let consts = [
            self.rho1, self.b1, self.m1, self.m2, self.kappa, self.rho2, self.m3, self.b2,
        ];
        if consts.iter().any(|c| !c.is_finite()) {
            return bad("constants must be finite");
        }
        Ok(())
    }
}

/// Data that is constant on one time segment `[start, next start)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start: f64,
    /// `rates[x][pair]`: sparse off-diagonal targets, sorted by target.
    rates: Vec<Vec<Vec<(usize, f64)>>>,
    exit: Vec<Vec<f64>>,
    costs: Vec<Vec<f64>>,
}

impl Segment {
    fn refresh(&mut self) {
        self.exit = self
            .rates
            .iter()
            .map(|per_pair| per_pair.iter().map(|row| row.iter().map(|&(_, r)| r).sum()).collect())
            .collect();
    }

    pub fn rates(&self, x: usize, pair: usize) -> &[(usize, f64)] {
        &self.rates[x][pair]
    }

    pub fn exit_rate(&self, x: usize, pair: usize) -> f64 {
        self.exit[x][pair]
    }

    pub fn cost(&self, x: usize, pair: usize) -> f64 {
        self.costs[x][pair]
    }
}

/// A validated, immutable game instance. Player 1 (rows) maximizes the
/// risk-sensitive cost, player 2 (columns) minimizes it.
#[derive(Debug, Clone, PartialEq)]
pub struct GameModel {
    pub states: StateSpace,
    pub lambda: f64,
    pub horizon: f64,
    actions_p1: Vec<Vec<String>>,
    actions_p2: Vec<Vec<String>>,
    segments: Vec<Segment>,
    terminal: Vec<f64>,
    pub lyapunov: Option<LyapunovData>,
}

impl GameModel {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_p1(&self, x: usize) -> usize {
        self.actions_p1[x].len()
    }

    pub fn n_p2(&self, x: usize) -> usize {
        self.actions_p2[x].len()
    }

    pub fn p1_labels(&self, x: usize) -> &[String] {
        &self.actions_p1[x]
    }

    pub fn p2_labels(&self, x: usize) -> &[String] {
        &self.actions_p2[x]
    }

    pub fn max_actions(&self) -> (usize, usize) {
        let m = (0..self.n_states()).map(|x| self.n_p1(x)).max().unwrap_or(1);
        let n = (0..self.n_states()).map(|x| self.n_p2(x)).max().unwrap_or(1);
        (m, n)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Segment active at time `t` (segments are right-open; `T` belongs to
    /// the last one).
    pub fn segment_index(&self, t: f64) -> usize {
        self.segments.partition_point(|s| s.start <= t).saturating_sub(1)
    }

    pub fn segment_at(&self, t: f64) -> &Segment {
        &self.segments[self.segment_index(t)]
    }

    pub fn terminal(&self, x: usize) -> f64 {
        self.terminal[x]
    }

    pub fn terminal_slice(&self) -> &[f64] {
        &self.terminal
    }

    pub fn flow(&self, x: usize, dt: f64) -> usize {
        self.states.flow(x, dt)
    }

    pub fn is_step_aligned(&self, dt: f64) -> bool {
        self.states.is_step_aligned(dt)
    }

    pub fn cost(&self, t: f64, x: usize, a: usize, b: usize) -> f64 {
        self.segment_at(t).cost(x, a * self.n_p2(x) + b)
    }

    /// Completed rate row (diagonal included) for a pure action pair.
    pub fn rate_row(&self, t: f64, x: usize, a: usize, b: usize) -> Vec<f64> {
        let seg = self.segment_at(t);
        let pair = a * self.n_p2(x) + b;
        let mut row = vec![0.0; self.n_states()];
        for &(y, r) in seg.rates(x, pair) {
            row[y] = r;
        }
        row[x] = -seg.exit_rate(x, pair);
        row
    }

    /// `q*(x)`: the largest exit rate over action pairs and segments.
    pub fn q_star(&self, x: usize) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.exit[x].iter().copied())
            .fold(0.0, f64::max)
    }

    pub fn max_q_star(&self) -> f64 {
        (0..self.n_states()).map(|x| self.q_star(x)).fold(0.0, f64::max)
    }

    pub fn max_abs_cost(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.costs.iter().flatten())
            .fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn max_abs_terminal(&self) -> f64 {
        self.terminal.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn min_cost(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.costs.iter().flatten())
            .fold(f64::INFINITY, |m, &c| m.min(c))
    }

    pub fn check_mixes(&self, x: usize, mu: &[f64], nu: &[f64]) -> Result<()> {
        check_simplex(mu, self.n_p1(x), "mu")?;
        check_simplex(nu, self.n_p2(x), "nu")
    }

    /// Bilinear average of the completed rate rows under `(mu, nu)`.
    pub fn mixed_rate(&self, t: f64, x: usize, mu: &[f64], nu: &[f64]) -> Result<Vec<f64>> {
        self.check_mixes(x, mu, nu)?;
        let seg = self.segment_at(t);
        let nb = self.n_p2(x);
        let mut row = vec![0.0; self.n_states()];
        for (a, &pa) in mu.iter().enumerate() {
            for (b, &pb) in nu.iter().enumerate() {
                let w = pa * pb;
                if w == 0.0 {
                    continue;
                }
                for &(y, r) in seg.rates(x, a * nb + b) {
                    row[y] += w * r;
                }
            }
        }
        row[x] = 0.0;
        row[x] = -row.iter().sum::<f64>();
        Ok(row)
    }

    pub fn mixed_cost(&self, t: f64, x: usize, mu: &[f64], nu: &[f64]) -> Result<f64> {
        self.check_mixes(x, mu, nu)?;
        Ok(mixed_cost_in(self.segment_at(t), x, self.n_p2(x), mu, nu))
    }

    /// Replaces costs and terminal values through the given maps, keeping
    /// everything else. Used by the truncation ladders.
    pub(crate) fn map_costs(
        &self,
        mut cost: impl FnMut(f64, usize, f64) -> f64,
        mut terminal: impl FnMut(usize, f64) -> f64,
    ) -> GameModel {
        let mut out = self.clone();
        for seg in &mut out.segments {
            let start = seg.start;
            for (x, per_pair) in seg.costs.iter_mut().enumerate() {
                for c in per_pair.iter_mut() {
                    *c = cost(start, x, *c);
                }
            }
            seg.refresh();
        }
        for (x, g) in out.terminal.iter_mut().enumerate() {
            *g = terminal(x, *g);
        }
        out
    }

    /// Removes every jump out of the states where `frozen` holds.
    pub(crate) fn freeze_states(&mut self, frozen: impl Fn(usize) -> bool) {
        for seg in &mut self.segments {
            for (x, per_pair) in seg.rates.iter_mut().enumerate() {
                if frozen(x) {
                    per_pair.iter_mut().for_each(Vec::clear);
                }
            }
            seg.refresh();
        }
    }
}

/// `mu^T C nu` for the cost table of state `x` in `seg`.
pub(crate) fn mixed_cost_in(seg: &Segment, x: usize, nb: usize, mu: &[f64], nu: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, &pa) in mu.iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (b, &pb) in nu.iter().enumerate() {
            inner += pb * seg.cost(x, a * nb + b);
        }
        acc += pa * inner;
    }
    acc
}

pub fn check_simplex(p: &[f64], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::Simplex(format!("{what} has {} entries, expected {len}", p.len())));
    }
    if p.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) {
        return Err(Error::Simplex(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL * len.max(1) as f64 {
        return Err(Error::Simplex(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Piecewise-constant value: `base` on `[0, first start)`, then the listed
/// `(start, value)` pieces.
#[derive(Debug, Clone, PartialEq, Default)]
struct Piecewise {
    base: f64,
    pieces: Vec<(f64, f64)>,
}

impl Piecewise {
    fn at(&self, t: f64) -> f64 {
        self.pieces
            .iter()
            .rev()
            .find(|(s, _)| *s <= t)
            .map_or(self.base, |&(_, v)| v)
    }
}

/// Incremental construction of a [`GameModel`]. Entries given later replace
/// earlier ones for the same key.
#[derive(Debug, Clone)]
pub struct ModelBuilder {
    states: StateSpace,
    lambda: f64,
    horizon: f64,
    actions_p1: Vec<Vec<String>>,
    actions_p2: Vec<Vec<String>>,
    rates: BTreeMap<(usize, usize, usize, usize), Piecewise>,
    costs: BTreeMap<(usize, usize, usize), Piecewise>,
    terminal: Vec<f64>,
    lyapunov: Option<LyapunovData>,
}

impl ModelBuilder {
    pub fn new(states: StateSpace, lambda: f64, horizon: f64) -> Self {
        let n = states.len();
        ModelBuilder {
            states,
            lambda,
            horizon,
            actions_p1: vec![vec!["0".into()]; n],
            actions_p2: vec![vec!["0".into()]; n],
            rates: BTreeMap::new(),
            costs: BTreeMap::new(),
            terminal: vec![0.0; n],
            lyapunov: None,
        }
    }

    pub fn finite(names: &[&str], lambda: f64, horizon: f64) -> Self {
        Self::new(StateSpace::Finite(names.iter().map(|s| s.to_string()).collect()), lambda, horizon)
    }

    pub fn states(&self) -> &StateSpace {
        &self.states
    }

    pub fn n_p1(&self, x: usize) -> usize {
        self.actions_p1[x].len()
    }

    pub fn n_p2(&self, x: usize) -> usize {
        self.actions_p2[x].len()
    }

    pub fn p1_labels(&self, x: usize) -> &[String] {
        &self.actions_p1[x]
    }

    pub fn p2_labels(&self, x: usize) -> &[String] {
        &self.actions_p2[x]
    }

    fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.states.len() {
            return Err(Error::Validation(format!("state index {x} out of range")));
        }
        Ok(())
    }

    fn check_pair(&self, x: usize, a: usize, b: usize) -> Result<()> {
        self.check_state(x)?;
        if a >= self.n_p1(x) || b >= self.n_p2(x) {
            return Err(Error::Validation(format!(
                "action pair ({a}, {b}) out of range at state {}",
                self.states.name(x)
            )));
        }
        Ok(())
    }

    fn check_pieces(&self, pieces: &[(f64, f64)]) -> Result<()> {
        let mut last = 0.0;
        for &(s, _) in pieces {
            if !(s > last && s < self.horizon) {
                return Err(Error::Validation(format!(
                    "segment start {s} must be increasing and inside (0, horizon)"
                )));
            }
            last = s;
        }
        Ok(())
    }

    pub fn actions(&mut self, x: usize, p1: Vec<String>, p2: Vec<String>) -> Result<&mut Self> {
        self.check_state(x)?;
        for (who, list) in [("p1", &p1), ("p2", &p2)] {
            if list.is_empty() {
                return Err(Error::Validation(format!(
                    "empty {who} action list at state {}",
                    self.states.name(x)
                )));
            }
            let mut seen = list.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != list.len() {
                return Err(Error::Validation(format!("duplicate {who} action label")));
            }
        }
        self.actions_p1[x] = p1;
        self.actions_p2[x] = p2;
        Ok(self)
    }

    pub fn action_counts(&mut self, x: usize, m: usize, n: usize) -> Result<&mut Self> {
        let labels = |k: usize| (0..k).map(|i| i.to_string()).collect();
        self.actions(x, labels(m), labels(n))
    }

    pub fn rate(&mut self, from: usize, a: usize, b: usize, to: usize, rate: f64) -> Result<&mut Self> {
        self.rate_segments(from, a, b, to, rate, Vec::new())
    }

    pub fn rate_segments(
        &mut self,
        from: usize,
        a: usize,
        b: usize,
        to: usize,
        rate: f64,
        pieces: Vec<(f64, f64)>,
    ) -> Result<&mut Self> {
        self.check_pair(from, a, b)?;
        self.check_state(to)?;
        if to == from {
            return Err(Error::Validation(format!(
                "self-transition at state {}; the diagonal is implied",
                self.states.name(from)
            )));
        }
        for v in std::iter::once(rate).chain(pieces.iter().map(|p| p.1)) {
            if !v.is_finite() {
                return Err(Error::Validation("non-finite rate".into()));
            }
            if v < 0.0 {
                return Err(Error::Validation("negative off-diagonal rate".into()));
            }
        }
        self.check_pieces(&pieces)?;
        self.rates.insert((from, a, b, to), Piecewise { base: rate, pieces });
        Ok(self)
    }

    pub fn cost(&mut self, x: usize, a: usize, b: usize, value: f64) -> Result<&mut Self> {
        self.cost_segments(x, a, b, value, Vec::new())
    }

    pub fn cost_segments(
        &mut self,
        x: usize,
        a: usize,
        b: usize,
        value: f64,
        pieces: Vec<(f64, f64)>,
    ) -> Result<&mut Self> {
        self.check_pair(x, a, b)?;
        if std::iter::once(value).chain(pieces.iter().map(|p| p.1)).any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite cost".into()));
        }
        self.check_pieces(&pieces)?;
        self.costs.insert((x, a, b), Piecewise { base: value, pieces });
        Ok(self)
    }

    pub fn terminal(&mut self, x: usize, value: f64) -> Result<&mut Self> {
        self.check_state(x)?;
        if !value.is_finite() {
            return Err(Error::Validation("non-finite terminal value".into()));
        }
        self.terminal[x] = value;
        Ok(self)
    }

    pub fn lyapunov(&mut self, data: LyapunovData) -> &mut Self {
        self.lyapunov = Some(data);
        self
    }

    pub fn build(&self) -> Result<GameModel> {
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::Validation(format!("lambda = {} must lie in (0, 1]", self.lambda)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Validation(format!("horizon = {} must be > 0", self.horizon)));
        }
        validate_space(&self.states)?;
        let n = self.states.len();
        if let Some(l) = &self.lyapunov {
            l.validate(n)?;
        }

        let mut starts: Vec<f64> = vec![0.0];
        for p in self.rates.values().chain(self.costs.values()) {
            starts.extend(p.pieces.iter().map(|q| q.0));
        }
        starts.sort_by(f64::total_cmp);
        starts.dedup();

        let segments = starts
            .iter()
            .map(|&start| {
                let mut rates: Vec<Vec<Vec<(usize, f64)>>> = (0..n)
                    .map(|x| vec![Vec::new(); self.n_p1(x) * self.n_p2(x)])
                    .collect();
                for (&(from, a, b, to), p) in &self.rates {
                    let r = p.at(start);
                    if r > 0.0 {
                        rates[from][a * self.n_p2(from) + b].push((to, r));
                    }
                }
                let mut costs: Vec<Vec<f64>> =
                    (0..n).map(|x| vec![0.0; self.n_p1(x) * self.n_p2(x)]).collect();
                for (&(x, a, b), p) in &self.costs {
                    costs[x][a * self.n_p2(x) + b] = p.at(start);
                }
                let mut seg = Segment {
                    start,
                    rates,
                    exit: Vec::new(),
                    costs,
                };
                seg.refresh();
                seg
            })
            .collect::<Vec<_>>();

        if segments.iter().flat_map(|s| s.exit.iter().flatten()).any(|q| !q.is_finite()) {
            return Err(Error::Validation("exit rate is not finite (stability)".into()));
        }

        Ok(GameModel {
            states: self.states.clone(),
            lambda: self.lambda,
            horizon: self.horizon,
            actions_p1: self.actions_p1.clone(),
            actions_p2: self.actions_p2.clone(),
            segments,
            terminal: self.terminal.clone(),
            lyapunov: self.lyapunov.clone(),
        })
    }
}

fn validate_space(states: &StateSpace) -> Result<()> {
    match states {
        StateSpace::Finite(names) => {
            if names.is_empty() {
                return Err(Error::Validation("a finite state space needs at least one state".into()));
            }
            let mut sorted = names.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != names.len() {
                return Err(Error::Validation("duplicate state name".into()));
            }
        }
        StateSpace::GridFlow(g) => {
            if g.modes.is_empty() {
                return Err(Error::Validation("grid_flow needs at least one mode".into()));
            }
            if g.cells < 2 {
                return Err(Error::Validation("grid_flow needs at least two cells".into()));
            }
            if !(g.min < g.max && g.min.is_finite() && g.max.is_finite()) {
                return Err(Error::Validation("grid_flow needs min < max".into()));
            }
            if g.modes.iter().any(|m| !m.drift.is_finite() || m.name.contains('@')) {
                return Err(Error::Validation("mode drift must be finite and names may not contain '@'".into()));
            }
        }
    }
    Ok(())
}
