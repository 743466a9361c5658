//! Trajectory simulation under a Markov strategy pair and Monte Carlo
//! estimation of `E exp(lambda int c + lambda g)`.
//!
//! Jumps are generated by thinning against a constant proposal rate
//! `rate_bound_factor * max q*`. Strategies enter through their averaged
//! rates and costs; actions are never sampled. Between jumps the running
//! cost is integrated exactly: the integrand is constant between strategy
//! grid times, model segment starts and cell crossings of the flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::Serialize;

use crate::model::{mixed_cost_in, Boundary, GameModel, StateSpace};
use crate::shapley::{StrategyField, MAX_EXPONENT};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub seed: u64,
    pub rate_bound_factor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { n_paths: 10_000, seed: 0, rate_bound_factor: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Jump {
    pub time: f64,
    pub state: usize,
    pub exponent_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub t0: f64,
    pub x0: usize,
    pub jumps: Vec<Jump>,
    /// State at the horizon.
    pub end_state: usize,
    /// `lambda int c ds + lambda g(T, xi_T)`.
    pub exponent: f64,
    /// Proposals drawn before the horizon (accepted or not).
    pub proposals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub min_exponent: f64,
    pub max_exponent: f64,
}

/// Position between jumps: the state at the last jump and, on grid flows,
/// the cell coordinate moving at the mode's velocity.
#[derive(Clone, Copy)]
struct Anchor {
    time: f64,
    state: usize,
}

struct Path<'a> {
    model: &'a GameModel,
    strategies: &'a StrategyField,
    /// `cum[k * S + x]`: integral of the mixed cost at `x` over `[0, t_k]`
    /// of the strategy grid. Empty when a segment starts between knots.
    cum: Vec<f64>,
}

impl<'a> Path<'a> {
    fn new(model: &'a GameModel, strategies: &'a StrategyField) -> Self {
        let grid = strategies.grid;
        let s = model.n_states();
        let aligned = model.segments().iter().all(|seg| {
            let k = (seg.start / grid.dt()).round();
            (seg.start - k * grid.dt()).abs() <= 1e-12 * model.horizon.max(1.0)
        });
        let mut cum = Vec::new();
        if aligned {
            cum = vec![0.0; (grid.steps + 1) * s];
            for k in 0..grid.steps {
                let seg = model.segment_at(0.5 * (grid.t(k) + grid.t(k + 1)));
                let dt = grid.t(k + 1) - grid.t(k);
                for x in 0..s {
                    let c = mixed_cost_in(seg, x, model.n_p2(x), strategies.mu(k, x), strategies.nu(k, x));
                    cum[(k + 1) * s + x] = cum[k * s + x] + c * dt;
                }
            }
        }
        Path { model, strategies, cum }
    }

    /// Integral of the mixed cost at the fixed state `y` over `[0, t]`.
    fn primitive(&self, y: usize, t: f64) -> f64 {
        let s = self.model.n_states();
        let grid = self.strategies.grid;
        let k = self.strategies.index_at(t);
        let (lo, hi) = (self.cum[k * s + y], self.cum[(k + 1) * s + y]);
        let (t0, t1) = (grid.t(k), grid.t(k + 1));
        lo + (hi - lo) * (t - t0) / (t1 - t0)
    }

    fn state_at(&self, anchor: Anchor, t: f64) -> usize {
        match &self.model.states {
            StateSpace::Finite(_) => anchor.state,
            StateSpace::GridFlow(g) => {
                let (m, c) = self.model.states.split(anchor.state);
                let u = c as f64 + g.cell_velocity(m) * (t - anchor.time);
                self.model.states.join(m, g.cell_at(u))
            }
        }
    }

    /// First time after `a` at which the flow enters another cell, or
    /// infinity.
    fn next_crossing(&self, anchor: Anchor, a: f64) -> f64 {
        let StateSpace::GridFlow(g) = &self.model.states else {
            return f64::INFINITY;
        };
        let (m, c) = self.model.states.split(anchor.state);
        let v = g.cell_velocity(m);
        if v == 0.0 {
            return f64::INFINITY;
        }
        let p0 = c as f64;
        let u = p0 + v * (a - anchor.time);
        let last = (g.cells - 1) as f64;
        let mut h = if v > 0.0 { (u + 0.5).floor() + 0.5 } else { (u - 0.5).ceil() - 0.5 };
        if g.boundary == Boundary::Clamp && (h >= last + 0.5 || h <= -0.5) {
            return f64::INFINITY;
        }
        let mut t = anchor.time + (h - p0) / v;
        while t <= a {
            h += v.signum();
            t = anchor.time + (h - p0) / v;
        }
        t
    }

    fn next_break(&self, anchor: Anchor, a: f64, b: f64) -> f64 {
        let k = self.strategies.index_at(a);
        let mut grid_next = self.strategies.grid.t(k + 1);
        if grid_next <= a && k + 2 <= self.strategies.grid.steps {
            grid_next = self.strategies.grid.t(k + 2);
        }
        let segs = self.model.segments();
        let seg_next = segs
            .get(self.model.segment_index(a) + 1)
            .map_or(f64::INFINITY, |s| s.start);
        let mut end = b.min(grid_next).min(seg_next).min(self.next_crossing(anchor, a));
        if end <= a {
            end = b;
        }
        end
    }

    /// `lambda int_a^b c(s, xi_s, mu_s, nu_s) ds` along the flow from `anchor`.
    fn cost_integral(&self, anchor: Anchor, a: f64, b: f64) -> f64 {
        if !self.cum.is_empty() {
            let mut acc = 0.0;
            let mut lo = a;
            while lo < b {
                let hi = self.next_crossing(anchor, lo).min(b);
                let y = self.state_at(anchor, 0.5 * (lo + hi));
                acc += self.primitive(y, hi) - self.primitive(y, lo);
                lo = hi;
            }
            return self.model.lambda * acc;
        }
        let mut acc = 0.0;
        let mut lo = a;
        while lo < b {
            let hi = self.next_break(anchor, lo, b);
            let mid = 0.5 * (lo + hi);
            let y = self.state_at(anchor, mid);
            let k = self.strategies.index_at(mid);
            let c = mixed_cost_in(
                self.model.segment_at(mid),
                y,
                self.model.n_p2(y),
                self.strategies.mu(k, y),
                self.strategies.nu(k, y),
            );
            acc += c * (hi - lo);
            lo = hi;
        }
        self.model.lambda * acc
    }

    /// Thinning decision at a proposal: the accepted target, if any. One
    /// uniform both accepts (with probability `q / q_bar`) and picks the
    /// target proportionally to the mixed off-diagonal rates.
    fn jump_target(&self, t: f64, y: usize, q_bar: f64, u: f64) -> Result<Option<usize>> {
        let seg = self.model.segment_at(t);
        let k = self.strategies.index_at(t);
        let (mu, nu) = (self.strategies.mu(k, y), self.strategies.nu(k, y));
        let nb = self.model.n_p2(y);
        let threshold = u * q_bar;
        let mut acc = 0.0;
        let mut hit = None;
        for (a, &pa) in mu.iter().enumerate() {
            for (b, &pb) in nu.iter().enumerate() {
                let w = pa * pb;
                if w == 0.0 {
                    continue;
                }
                for &(target, r) in seg.rates(y, a * nb + b) {
                    acc += w * r;
                    if hit.is_none() && acc > threshold {
                        hit = Some(target);
                    }
                }
            }
        }
        if acc > q_bar * (1.0 + 1e-12) {
            return Err(Error::ProposalBound { actual: acc, bound: q_bar, time: t });
        }
        Ok(hit)
    }
}

fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One trajectory from `(t0, x0)`; `stream` selects an independent random
/// substream of the configured seed.
pub fn simulate_path(
    model: &GameModel,
    strategies: &StrategyField,
    t0: f64,
    x0: usize,
    stream: u64,
    config: &SimConfig,
) -> Result<Trajectory> {
    let mut rng = path_rng(config.seed, stream);
    simulate_with(&Path::new(model, strategies), t0, x0, &mut rng, config.rate_bound_factor)
}

fn check_inputs(model: &GameModel, strategies: &StrategyField, t0: f64, x0: usize, factor: f64) -> Result<()> {
    strategies.validate(model, 1e-9)?;
    if !(0.0..model.horizon).contains(&t0) {
        return Err(Error::Validation(format!("start time {t0} outside [0, T)")));
    }
    if x0 >= model.n_states() {
        return Err(Error::Validation(format!("start state {x0} out of range")));
    }
    if !(factor >= 1.0) {
        return Err(Error::Validation("rate_bound_factor must be >= 1".into()));
    }
    Ok(())
}

fn simulate_with(
    path: &Path,
    t0: f64,
    x0: usize,
    rng: &mut ChaCha8Rng,
    factor: f64,
) -> Result<Trajectory> {
    let model = path.model;
    let horizon = model.horizon;
    let q_bar = factor * model.max_q_star();
    let proposal = (q_bar > 0.0).then(|| Exp::new(q_bar).expect("positive rate"));
    let mut anchor = Anchor { time: t0, state: x0 };
    let mut now = t0;
    let mut exponent = 0.0;
    let mut jumps = Vec::new();
    let mut proposals = 0;
    loop {
        let next = proposal.as_ref().map_or(f64::INFINITY, |d| now + d.sample(rng));
        let until = next.min(horizon);
        exponent += path.cost_integral(anchor, now, until);
        if next >= horizon {
            break;
        }
        proposals += 1;
        let y = path.state_at(anchor, next);
        let u: f64 = rng.random();
        if let Some(target) = path.jump_target(next, y, q_bar, u)? {
            anchor = Anchor { time: next, state: target };
            jumps.push(Jump { time: next, state: target, exponent_so_far: exponent });
        }
        now = next;
    }
    let end_state = path.state_at(anchor, horizon);
    exponent += model.lambda * model.terminal(end_state);
    Ok(Trajectory { t0, x0, jumps, end_state, exponent, proposals })
}

/// Exponent of each path, in path order.
fn exponents(
    model: &GameModel,
    strategies: &StrategyField,
    t0: f64,
    x0: usize,
    config: &SimConfig,
) -> Result<Vec<f64>> {
    check_inputs(model, strategies, t0, x0, config.rate_bound_factor)?;
    if config.n_paths == 0 {
        return Err(Error::Validation("n_paths must be >= 1".into()));
    }
    let path = Path::new(model, strategies);
    (0..config.n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(config.seed, i);
            Ok(simulate_with(&path, t0, x0, &mut rng, config.rate_bound_factor)?.exponent)
        })
        .collect()
}

/// Sample mean and standard error of `exp(exponent)` over
/// `config.n_paths` paths. Paths run in parallel on substreams keyed by
/// path index and are reduced in index order, so the result does not depend
/// on the thread count.
pub fn estimate_j(
    model: &GameModel,
    strategies: &StrategyField,
    t0: f64,
    x0: usize,
    config: &SimConfig,
) -> Result<MCEstimate> {
    let ex = exponents(model, strategies, t0, x0, config)?;
    let max_exponent = ex.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_exponent = ex.iter().copied().fold(f64::INFINITY, f64::min);
    if max_exponent > MAX_EXPONENT {
        return Err(Error::Overflow { what: "path exponent".into(), max_exponent });
    }
    let n = ex.len() as f64;
    let mean = ex.iter().map(|e| e.exp()).sum::<f64>() / n;
    let stderr = if ex.len() > 1 {
        let var = ex.iter().map(|e| (e.exp() - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(MCEstimate { mean, stderr, n_paths: ex.len(), min_exponent, max_exponent })
}

/// The first `count` trajectories of the run configured by `config`, for
/// dumping.
pub fn sample_paths(
    model: &GameModel,
    strategies: &StrategyField,
    t0: f64,
    x0: usize,
    count: usize,
    config: &SimConfig,
) -> Result<Vec<Trajectory>> {
    check_inputs(model, strategies, t0, x0, config.rate_bound_factor)?;
    let path = Path::new(model, strategies);
    (0..count.min(config.n_paths) as u64)
        .map(|i| simulate_with(&path, t0, x0, &mut path_rng(config.seed, i), config.rate_bound_factor))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GridFlow, Mode, ModelBuilder};

    fn uncontrolled() -> GameModel {
        let mut b = ModelBuilder::finite(&["1", "2"], 1.0, 1.0);
        b.rate(0, 0, 0, 1, 1.0).unwrap();
        b.cost(0, 0, 0, 1.0).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn no_jumps_is_deterministic() {
        let mut b = ModelBuilder::finite(&["s"], 0.5, 1.0);
        b.cost(0, 0, 0, 2.0).unwrap();
        let m = b.build().unwrap();
        let s = StrategyField::uniform(&m, 7).unwrap();
        let cfg = SimConfig { n_paths: 50, ..Default::default() };
        let e = estimate_j(&m, &s, 0.0, 0, &cfg).unwrap();
        assert!((e.mean - std::f64::consts::E).abs() < 1e-14);
        assert!(e.stderr < 1e-14);
        let p = simulate_path(&m, &s, 0.25, 0, 3, &cfg).unwrap();
        assert!(p.jumps.is_empty());
        assert!((p.exponent - 0.75).abs() < 1e-15);
    }

    #[test]
    fn thinning_accepts_with_rate_ratio() {
        // intensity 1 against a proposal rate 2: accept iff u < 1/2
        let m = uncontrolled();
        let s = StrategyField::uniform(&m, 4).unwrap();
        let path = Path::new(&m, &s);
        assert_eq!(path.jump_target(0.3, 0, 2.0, 0.49).unwrap(), Some(1));
        assert_eq!(path.jump_target(0.3, 0, 2.0, 0.51).unwrap(), None);
        assert!(matches!(path.jump_target(0.3, 0, 0.5, 0.1), Err(Error::ProposalBound { .. })));
    }

    #[test]
    fn uncontrolled_jump_times_follow_truncated_exponential() {
        let m = uncontrolled();
        let s = StrategyField::uniform(&m, 10).unwrap();
        let cfg = SimConfig { n_paths: 100_000, seed: 7, rate_bound_factor: 2.0 };
        let mut times: Vec<f64> = (0..cfg.n_paths as u64)
            .into_par_iter()
            .filter_map(|i| simulate_path(&m, &s, 0.0, 0, i, &cfg).unwrap().jumps.first().map(|j| j.time))
            .collect();
        times.sort_by(f64::total_cmp);
        let n = times.len() as f64;
        let z = 1.0 - (-1.0f64).exp();
        let d = times
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let f = (1.0 - (-t).exp()) / z;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov-Smirnov at alpha = 0.01
        assert!(d < 1.628 / n.sqrt(), "D = {d}");
        // about 1 - e^{-1} of the paths jump before T
        assert!((n / cfg.n_paths as f64 - z).abs() < 0.01);
    }

    #[test]
    fn uncontrolled_mean_is_two() {
        let m = uncontrolled();
        let s = StrategyField::uniform(&m, 10).unwrap();
        let e = estimate_j(&m, &s, 0.0, 0, &SimConfig { n_paths: 100_000, seed: 11, rate_bound_factor: 1.0 }).unwrap();
        assert!((e.mean - 2.0).abs() <= 3.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn same_seed_same_estimate() {
        let m = uncontrolled();
        let s = StrategyField::uniform(&m, 10).unwrap();
        let cfg = SimConfig { n_paths: 2000, seed: 99, rate_bound_factor: 1.5 };
        assert_eq!(estimate_j(&m, &s, 0.0, 0, &cfg).unwrap(), estimate_j(&m, &s, 0.0, 0, &cfg).unwrap());
        let other = SimConfig { seed: 100, ..cfg.clone() };
        assert_ne!(estimate_j(&m, &s, 0.0, 0, &cfg).unwrap(), estimate_j(&m, &s, 0.0, 0, &other).unwrap());
    }

    #[test]
    fn grid_flow_cost_follows_cells() {
        // one mode moving 4 cells per unit time with cost equal to the cell
        // index; starting in cell 0 for T = 1 the cell is k on (k - 1/2, k + 1/2)/4
        let states = StateSpace::GridFlow(GridFlow {
            modes: vec![Mode { name: "m".into(), drift: 4.0 }],
            min: 0.0,
            max: 10.0,
            cells: 10,
            boundary: Boundary::Clamp,
        });
        let mut b = ModelBuilder::new(states, 1.0, 1.0);
        for c in 0..10 {
            b.cost(c, 0, 0, c as f64).unwrap();
        }
        b.terminal(4, 0.5).unwrap();
        let m = b.build().unwrap();
        let s = StrategyField::uniform(&m, 3).unwrap();
        let p = simulate_path(&m, &s, 0.0, 0, 0, &SimConfig::default()).unwrap();
        // int = 1*(1/4) + 2*(1/4) + 3*(1/4) + 4*(1/8) = 2, plus g(cell 4)
        assert!((p.exponent - 2.5).abs() < 1e-12, "{}", p.exponent);
        assert_eq!(p.end_state, 4);
    }

    #[test]
    fn prefix_sums_match_piecewise_integration() {
        let states = StateSpace::GridFlow(GridFlow {
            modes: vec![Mode { name: "r".into(), drift: 3.0 }, Mode { name: "l".into(), drift: -2.0 }],
            min: 0.0,
            max: 1.0,
            cells: 7,
            boundary: Boundary::Reflect,
        });
        let mut b = ModelBuilder::new(states, 0.5, 1.0);
        for x in 0..14 {
            b.action_counts(x, 2, 1).unwrap();
            b.cost(x, 0, 0, 0.3 * x as f64).unwrap();
            b.cost(x, 1, 0, 1.0 - 0.05 * x as f64).unwrap();
        }
        let m = b.build().unwrap();
        let grid = crate::shapley::TimeGrid::new(9, 1.0).unwrap();
        let mu = (0..9 * 14).map(|i| vec![(i % 5) as f64 / 4.0, 1.0 - (i % 5) as f64 / 4.0]).collect();
        let s = StrategyField::new(grid, 14, mu, vec![vec![1.0]; 9 * 14]).unwrap();
        let fast = Path::new(&m, &s);
        let slow = Path { cum: Vec::new(), ..Path::new(&m, &s) };
        for (x, a, b) in [(0, 0.0, 1.0), (3, 0.13, 0.71), (9, 0.5, 0.5), (12, 0.01, 0.99)] {
            let anchor = Anchor { time: a, state: x };
            let (f, w) = (fast.cost_integral(anchor, a, b), slow.cost_integral(anchor, a, b));
            assert!((f - w).abs() < 1e-13, "{x}: {f} vs {w}");
        }
    }
}
