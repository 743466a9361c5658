//! Truncation ladders. Nonnegative costs are approximated from below by
//! models with bounded costs that are frozen outside the sublevel set
//! `{V <= n}`; signed costs are cut off at `-n` and shifted by `n` to become
//! nonnegative, which multiplies the value by `e^{lambda (T - s + 1) n}`.

use rayon::prelude::*;
use serde::Serialize;

use crate::model::{GameModel, StateSpace};
use crate::shapley::{backward_solve, SolverConfig, TimeGrid, ValueField};
use crate::verify::check_bounds;
use crate::{Error, Result};

/// Slack for the monotonicity of ladder values in `n`.
pub const LADDER_SLACK: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LadderKind {
    /// Bounded truncations of a nonnegative-cost model; values increase in `n`.
    Nonneg,
    /// Costs cut off below at `-n`; values decrease in `n`.
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Probe {
    pub t: f64,
    pub state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderLevel {
    pub n: f64,
    pub phi_at_probe: Vec<f64>,
    /// Whether the level satisfies the Lyapunov sandwich; absent without
    /// Lyapunov data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bounds_ok: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LadderReport {
    pub kind: LadderKind,
    pub n_values: Vec<f64>,
    pub probes: Vec<Probe>,
    pub levels: Vec<LadderLevel>,
    /// Monotone in `n` at every grid point and state, over consecutive
    /// levels that solved.
    pub monotone_ok: bool,
    /// Largest step against the expected direction (0 when monotone).
    pub worst_violation: f64,
    /// `max |phi_n - phi_{n'}|` over the grid for the two largest levels.
    pub converged_gap: f64,
    pub complete: bool,
}

impl LadderReport {
    pub fn passed(&self) -> bool {
        self.complete && self.monotone_ok && self.levels.iter().all(|l| l.bounds_ok != Some(false))
    }
}

fn check_level(n: f64) -> Result<()> {
    if n.is_finite() && n >= 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("truncation level must be finite and >= 0, got {n}")))
    }
}

/// Bounded approximation of a nonnegative-cost model: jumps are switched off
/// outside `{V <= n}` and costs are zero there; inside, costs and terminal
/// payoffs are capped at `min(n, ln(M2 V(x)) / (2 (T + 1)))`.
pub fn truncate_nonneg(model: &GameModel, n: f64) -> Result<GameModel> {
    check_level(n)?;
    let ly = model.lyapunov.as_ref().ok_or(Error::MissingLyapunov)?;
    if model.min_cost() < 0.0 {
        return Err(Error::NegativeCost(format!("running cost down to {}", model.min_cost())));
    }
    if let Some(x) = (0..model.n_states()).find(|&x| model.terminal(x) < 0.0) {
        return Err(Error::NegativeCost(format!("terminal payoff at {}", model.states.name(x))));
    }
    if let StateSpace::GridFlow(_) = &model.states {
        // the cap uses V along the flow; it stays per-state only if V is
        // invariant, which is all piecewise constant costs can express
        let moving = (0..model.n_states()).find(|&x| ly.v[model.flow(x, model.horizon)] != ly.v[x]);
        if let Some(x) = moving {
            return Err(Error::Unsupported(format!(
                "nonnegative ladder on a grid flow needs V constant along the flow (state {})",
                model.states.name(x)
            )));
        }
    }
    let inside: Vec<bool> = ly.v.iter().map(|&v| v <= n).collect();
    let cap: Vec<f64> = ly
        .v
        .iter()
        .map(|&v| n.min((ly.m2 * v).ln() / (2.0 * (model.horizon + 1.0))))
        .collect();
    let clip = |x: usize, c: f64| if inside[x] { c.min(cap[x]) } else { 0.0 };
    let mut out = model.map_costs(|_, x, c| clip(x, c), clip);
    out.freeze_states(|x| !inside[x]);
    Ok(out)
}

/// `(c_n, g_n) = (max(-n, c), max(-n, g))` and the same model shifted by
/// `n`, whose costs are nonnegative.
pub fn truncate_general(model: &GameModel, n: f64) -> Result<(GameModel, GameModel)> {
    check_level(n)?;
    let truncated = model.map_costs(|_, _, c| c.max(-n), |_, g| g.max(-n));
    let shifted = truncated.map_costs(|_, _, c| c + n, |_, g| g + n);
    Ok((truncated, shifted))
}

/// `e^{lambda (T - s + 1) n}`.
pub fn shift_factor(lambda: f64, horizon: f64, s: f64, n: f64) -> Result<f64> {
    let e = lambda * (horizon - s + 1.0) * n;
    if e > crate::shapley::MAX_EXPONENT {
        return Err(Error::Overflow { what: "shift factor".into(), max_exponent: e });
    }
    Ok(e.exp())
}

/// Solves the truncated and the shifted general-ladder models at level `n`
/// and returns the worst relative error of
/// `phi_shifted(s, x) = phi_truncated(s, x) e^{lambda (T - s + 1) n}` over all
/// states. `s` is rounded to the nearest grid time.
pub fn shift_identity_check(model: &GameModel, n: f64, s: f64, config: &SolverConfig) -> Result<f64> {
    let (truncated, shifted) = truncate_general(model, n)?;
    let grid = TimeGrid::new(config.steps, model.horizon)?;
    let k = grid.nearest(s);
    let factor = shift_factor(model.lambda, model.horizon, grid.t(k), n)?;
    let (plain, _) = backward_solve(&truncated, config)?;
    let (moved, _) = backward_solve(&shifted, config)?;
    let mut worst = 0.0f64;
    for x in 0..model.n_states() {
        let expect = plain.at(k, x) * factor;
        worst = worst.max((moved.at(k, x) - expect).abs() / expect.abs());
    }
    Ok(worst)
}

/// Solves one ladder model per level of `n_list`. General ladders solve
/// the truncated (unshifted) model.
pub fn ladder_fields(
    model: &GameModel,
    kind: LadderKind,
    n_list: &[f64],
    config: &SolverConfig,
) -> Result<Vec<Result<(GameModel, ValueField)>>> {
    if n_list.is_empty() {
        return Err(Error::Validation("empty list of truncation levels".into()));
    }
    if n_list.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Validation("truncation levels must be strictly increasing".into()));
    }
    for &n in n_list {
        check_level(n)?;
    }
    if kind == LadderKind::Nonneg {
        // surface missing data and negative costs once, not per level
        truncate_nonneg(model, n_list[0])?;
    }
    Ok(n_list
        .par_iter()
        .map(|&n| {
            let level = match kind {
                LadderKind::Nonneg => truncate_nonneg(model, n)?,
                LadderKind::General => truncate_general(model, n)?.0,
            };
            let (field, _) = backward_solve(&level, config)?;
            Ok((level, field))
        })
        .collect())
}

pub fn ladder_run(
    model: &GameModel,
    kind: LadderKind,
    n_list: &[f64],
    probes: &[Probe],
    config: &SolverConfig,
) -> Result<LadderReport> {
    if let Some(p) = probes.iter().find(|p| p.state >= model.n_states() || !(0.0..=model.horizon).contains(&p.t)) {
        return Err(Error::Validation(format!("probe (t={}, x={}) outside the model", p.t, p.state)));
    }
    let solved = ladder_fields(model, kind, n_list, config)?;
    let mut levels = Vec::with_capacity(solved.len());
    let mut fields: Vec<&ValueField> = Vec::new();
    for (&n, outcome) in n_list.iter().zip(&solved) {
        match outcome {
            Ok((level, field)) => {
                let k = |t: f64| field.grid.nearest(t);
                let bounds_ok = match &level.lyapunov {
                    Some(_) => Some(check_bounds(field, level)?.passed),
                    None => None,
                };
                levels.push(LadderLevel {
                    n,
                    phi_at_probe: probes.iter().map(|p| field.at(k(p.t), p.state)).collect(),
                    bounds_ok,
                    error: None,
                });
                fields.push(field);
            }
            Err(e) => {
                levels.push(LadderLevel { n, phi_at_probe: Vec::new(), bounds_ok: None, error: Some(e.to_string()) });
            }
        }
    }
    let sign = match kind {
        LadderKind::Nonneg => 1.0,
        LadderKind::General => -1.0,
    };
    let mut worst_violation = 0.0f64;
    for pair in fields.windows(2) {
        for (lo, hi) in pair[0].values().iter().zip(pair[1].values()) {
            // positive when the later level moves against the expected direction
            worst_violation = worst_violation.max(sign * (lo - hi));
        }
    }
    let converged_gap = match fields.as_slice() {
        [.., a, b] => a.max_abs_diff(b)?,
        _ => 0.0,
    };
    Ok(LadderReport {
        kind,
        n_values: n_list.to_vec(),
        probes: probes.to_vec(),
        complete: levels.iter().all(|l| l.error.is_none()),
        levels,
        monotone_ok: worst_violation <= LADDER_SLACK,
        worst_violation,
        converged_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LyapunovData, ModelBuilder};

    fn lyap(v: Vec<f64>, m2: f64) -> LyapunovData {
        let n = v.len();
        LyapunovData {
            v,
            v1: vec![1.0; n],
            rho1: 1.0,
            b1: 0.0,
            m1: 1.0,
            m2,
            kappa: 10.0,
            rho2: 1.0,
            m3: 100.0,
            b2: 1.0,
        }
    }

    /// Three states in a line, costs (c0, c1, 0), both players with two actions.
    fn chain(c: [f64; 2], v: Vec<f64>, m2: f64) -> GameModel {
        let mut b = ModelBuilder::finite(&["a", "b", "c"], 1.0, 1.0);
        for (x, &cx) in c.iter().enumerate() {
            b.action_counts(x, 2, 2).unwrap();
            b.rate(x, 0, 0, x + 1, 1.0).unwrap();
            b.rate(x, 1, 1, x + 1, 1.5).unwrap();
            b.cost(x, 0, 0, cx).unwrap();
            b.cost(x, 1, 0, 0.5 * cx).unwrap();
            b.cost(x, 0, 1, 0.8 * cx).unwrap();
            b.cost(x, 1, 1, cx).unwrap();
        }
        b.lyapunov(lyap(v, m2));
        b.build().unwrap()
    }

    #[test]
    fn inactive_truncation_is_identity() {
        let m = chain([1.0, 0.5], vec![1.0, 2.0, 3.0], 1e6);
        assert_eq!(truncate_nonneg(&m, 10.0).unwrap(), m);
        assert_eq!(truncate_general(&m, 10.0).unwrap().0, m);
    }

    #[test]
    fn nonneg_truncation_examples() {
        let m = chain([5.0, 0.5], vec![1.0, 4.0, 3.0], 1e6);
        let t = truncate_nonneg(&m, 3.0).unwrap();
        // cap ln(1e6)/4 = 3.45 > 3
        assert_eq!(t.cost(0.0, 0, 0, 0), 3.0);
        assert_eq!(t.cost(0.0, 0, 1, 0), 2.5);
        // V(b) = 4 = n + 1: off the sublevel set
        assert_eq!(t.cost(0.0, 1, 0, 0), 0.0);
        assert_eq!(t.q_star(1), 0.0);
        assert_eq!(t.rate_row(0.0, 0, 1, 1), vec![-1.5, 1.5, 0.0]);

        let small = chain([5.0, 0.5], vec![1.0, 1.0, 1.0], 20.0);
        let t = truncate_nonneg(&small, 10.0).unwrap();
        assert!((t.cost(0.0, 0, 0, 0) - 20f64.ln() / 4.0).abs() < 1e-15);
    }

    #[test]
    fn nonneg_truncation_errors() {
        let mut m = chain([1.0, 1.0], vec![1.0; 3], 10.0);
        let mut bare = m.clone();
        bare.lyapunov = None;
        assert!(matches!(truncate_nonneg(&bare, 1.0), Err(Error::MissingLyapunov)));
        m = chain([-1.0, 1.0], vec![1.0; 3], 10.0);
        assert!(matches!(truncate_nonneg(&m, 1.0), Err(Error::NegativeCost(_))));
    }

    #[test]
    fn general_truncation_examples() {
        let mut b = ModelBuilder::finite(&["a", "b"], 1.0, 1.0);
        b.cost(0, 0, 0, -7.0).unwrap();
        b.cost(1, 0, 0, 2.0).unwrap();
        b.terminal(0, -1.0).unwrap();
        let m = b.build().unwrap();
        let (t, s) = truncate_general(&m, 3.0).unwrap();
        assert_eq!((t.cost(0.0, 0, 0, 0), s.cost(0.0, 0, 0, 0)), (-3.0, 0.0));
        assert_eq!((t.cost(0.0, 1, 0, 0), s.cost(0.0, 1, 0, 0)), (2.0, 5.0));
        let (t, s) = truncate_general(&m, 5.0).unwrap();
        assert_eq!((t.terminal(0), s.terminal(0)), (-1.0, 4.0));
    }

    #[test]
    fn shift_factor_examples() {
        assert!((shift_factor(1.0, 1.0, 0.0, 3.0).unwrap() - 403.4287934927351).abs() < 1e-9);
        assert_eq!(shift_factor(0.7, 2.0, 0.5, 0.0).unwrap(), 1.0);
        assert!(matches!(shift_factor(1.0, 1.0, 0.0, 400.0), Err(Error::Overflow { .. })));
    }

    #[test]
    fn shift_identity_on_signed_chain() {
        let m = chain([-2.0, 1.5], vec![1.0; 3], 10.0);
        let cfg = SolverConfig::with_steps(200);
        for (n, s) in [(0.0, 0.0), (1.0, 0.0), (2.0, 0.5)] {
            let err = shift_identity_check(&m, n, s, &cfg).unwrap();
            assert!(err <= 1e-9, "n={n}, s={s}: {err}");
        }
    }

    #[test]
    fn general_ladder_decreases_and_converges() {
        let m = chain([-3.0, -1.5], vec![1.0; 3], 10.0);
        let probes = [Probe { t: 0.0, state: 0 }, Probe { t: 0.5, state: 1 }];
        let r = ladder_run(&m, LadderKind::General, &[1.0, 2.0, 4.0, 8.0], &probes, &SolverConfig::with_steps(200)).unwrap();
        assert!(r.complete && r.monotone_ok, "{r:?}");
        assert_eq!(r.converged_gap, 0.0);
        assert!(r.levels[0].phi_at_probe[0] > r.levels[1].phi_at_probe[0]);
    }

    #[test]
    fn nonneg_ladder_increases_to_direct_solve() {
        let m = chain([2.0, 1.0], vec![1.0, 2.0, 3.0], 1e4);
        let cfg = SolverConfig::with_steps(200);
        let probes = [Probe { t: 0.0, state: 0 }];
        let r = ladder_run(&m, LadderKind::Nonneg, &[0.5, 1.0, 2.0, 3.0, 4.0], &probes, &cfg).unwrap();
        assert!(r.passed(), "{r:?}");
        let p: Vec<f64> = r.levels.iter().map(|l| l.phi_at_probe[0]).collect();
        assert!(p[0] < p[1] && p[1] < p[2], "{p:?}");
        let (direct, _) = backward_solve(&m, &cfg).unwrap();
        assert_eq!(p[4], direct.at(0, 0));
        assert_eq!(r.converged_gap, 0.0);
    }

    #[test]
    fn ladder_input_errors() {
        let m = chain([1.0, 1.0], vec![1.0; 3], 10.0);
        let cfg = SolverConfig::with_steps(10);
        assert!(ladder_run(&m, LadderKind::General, &[2.0, 1.0], &[], &cfg).is_err());
        assert!(ladder_run(&m, LadderKind::General, &[], &[], &cfg).is_err());
        assert!(ladder_run(&m, LadderKind::General, &[1.0], &[Probe { t: 0.0, state: 3 }], &cfg).is_err());
    }
}
