use serde::{Deserialize, Serialize};

/// What happens when a grid-flow trajectory reaches the end of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    #[default]
    Clamp,
    Reflect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub name: String,
    /// Velocity in grid units per unit time.
    pub drift: f64,
}

/// Hybrid state space: a discrete mode times a uniform 1-d grid of cells,
/// moving with a mode-dependent constant drift between jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFlow {
    pub modes: Vec<Mode>,
    pub min: f64,
    pub max: f64,
    pub cells: usize,
    pub boundary: Boundary,
}

impl GridFlow {
    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.cells as f64
    }

    /// Drift of `mode` measured in cells per unit time.
    pub fn cell_velocity(&self, mode: usize) -> f64 {
        self.modes[mode].drift / self.width()
    }

    pub fn center(&self, cell: usize) -> f64 {
        self.min + (cell as f64 + 0.5) * self.width()
    }

    /// Maps an unbounded cell coordinate (cell centres at integers) back onto
    /// `[0, cells - 1]` according to the boundary policy.
    pub fn fold(&self, u: f64) -> f64 {
        let last = (self.cells - 1) as f64;
        match self.boundary {
            Boundary::Clamp => u.clamp(0.0, last),
            Boundary::Reflect => {
                let period = 2.0 * last;
                let m = u.rem_euclid(period);
                if m > last {
                    period - m
                } else {
                    m
                }
            }
        }
    }

    fn fold_index(&self, i: i64) -> usize {
        let last = (self.cells - 1) as i64;
        match self.boundary {
            Boundary::Clamp => i.clamp(0, last) as usize,
            Boundary::Reflect => {
                let period = 2 * last;
                let m = i.rem_euclid(period);
                (if m > last { period - m } else { m }) as usize
            }
        }
    }

    /// Cell containing the unbounded coordinate `u`.
    pub fn cell_at(&self, u: f64) -> usize {
        let c = self.fold(u).round();
        (c.max(0.0) as usize).min(self.cells - 1)
    }

    pub fn flow_cell(&self, mode: usize, cell: usize, dt: f64) -> usize {
        let shift = (self.cell_velocity(mode) * dt).round() as i64;
        self.fold_index(cell as i64 + shift)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StateSpace {
    Finite(Vec<String>),
    GridFlow(GridFlow),
}

impl StateSpace {
    pub fn len(&self) -> usize {
        match self {
            StateSpace::Finite(names) => names.len(),
            StateSpace::GridFlow(g) => g.modes.len() * g.cells,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(mode, cell)` of a grid-flow state; `(0, x)` for finite spaces.
    pub fn split(&self, x: usize) -> (usize, usize) {
        match self {
            StateSpace::Finite(_) => (0, x),
            StateSpace::GridFlow(g) => (x / g.cells, x % g.cells),
        }
    }

    pub fn join(&self, mode: usize, cell: usize) -> usize {
        match self {
            StateSpace::Finite(_) => cell,
            StateSpace::GridFlow(g) => mode * g.cells + cell,
        }
    }

    pub fn name(&self, x: usize) -> String {
        match self {
            StateSpace::Finite(names) => names[x].clone(),
            StateSpace::GridFlow(g) => {
                let (m, c) = self.split(x);
                format!("{}@{}", g.modes[m].name, c)
            }
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        match self {
            StateSpace::Finite(names) => names.iter().position(|n| n == name),
            StateSpace::GridFlow(g) => {
                let (mode, cell) = name.split_once('@')?;
                let m = g.modes.iter().position(|md| md.name == mode)?;
                let c: usize = cell.parse().ok()?;
                (c < g.cells).then(|| self.join(m, c))
            }
        }
    }

    /// The deterministic motion between jumps. Identity on finite spaces;
    /// on grid flows the cell moves by `drift * dt / width` rounded to the
    /// nearest integer, then the boundary policy is applied.
    pub fn flow(&self, x: usize, dt: f64) -> usize {
        match self {
            StateSpace::Finite(_) => x,
            StateSpace::GridFlow(g) => {
                let (m, c) = self.split(x);
                self.join(m, g.flow_cell(m, c, dt))
            }
        }
    }

    /// True when every mode moves a whole number of cells in `dt`, so the
    /// rounded flow composes exactly over multiples of `dt`.
    pub fn is_step_aligned(&self, dt: f64) -> bool {
        match self {
            StateSpace::Finite(_) => true,
            StateSpace::GridFlow(g) => (0..g.modes.len()).all(|m| {
                let s = g.cell_velocity(m) * dt;
                (s - s.round()).abs() <= 1e-9 * s.abs().max(1.0)
            }),
        }
    }
}

impl StateSpace {
    /// True when `flow(flow(x, dt), k dt) == flow(x, (k + 1) dt)` for all
    /// states and all `k`, which lets flow lookups be chained step by step.
    pub fn composes_over(&self, dt: f64) -> bool {
        match self {
            StateSpace::Finite(_) => true,
            StateSpace::GridFlow(g) => g.boundary == Boundary::Clamp && self.is_step_aligned(dt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(boundary: Boundary) -> StateSpace {
        StateSpace::GridFlow(GridFlow {
            modes: vec![
                Mode { name: "up".into(), drift: 1.0 },
                Mode { name: "down".into(), drift: -0.5 },
            ],
            min: 0.0,
            max: 1.0,
            cells: 10,
            boundary,
        })
    }

    #[test]
    fn finite_flow_is_identity() {
        let s = StateSpace::Finite(vec!["a".into(), "b".into(), "c".into(), "d".into()]);
        assert_eq!(s.flow(3, 0.7), 3);
    }

    #[test]
    fn grid_flow_moves_by_drift() {
        let s = grid(Boundary::Clamp);
        let x = s.join(0, 5);
        assert_eq!(s.flow(x, 0.2), s.join(0, 7));
        assert_eq!(s.flow(x, 0.0), x);
        assert_eq!(s.flow(x, 10.0), s.join(0, 9));
        assert_eq!(s.flow(s.join(1, 1), 1.0), s.join(1, 0));
    }

    #[test]
    fn reflect_folds_back() {
        let s = grid(Boundary::Reflect);
        // 5 + 6 = 11 -> reflected about 9 -> 7
        assert_eq!(s.flow(s.join(0, 5), 0.6), s.join(0, 7));
        let g = match &s {
            StateSpace::GridFlow(g) => g.clone(),
            _ => unreachable!(),
        };
        assert_eq!(g.fold(11.0), 7.0);
        assert_eq!(g.fold(-2.0), 2.0);
        assert_eq!(g.cell_at(9.4), 9);
    }

    #[test]
    fn names_round_trip() {
        let s = grid(Boundary::Clamp);
        for x in 0..s.len() {
            assert_eq!(s.index_of(&s.name(x)), Some(x));
        }
        assert_eq!(s.index_of("up@10"), None);
    }

    proptest! {
        #[test]
        fn flow_semigroup_on_aligned_times(x in 0usize..20, i in 0u32..30, j in 0u32..30,
                                           reflect in any::<bool>()) {
            let s = grid(if reflect { Boundary::Reflect } else { Boundary::Clamp });
            // mode 0 moves one cell per 0.1, mode 1 one cell per 0.2
            let (si, tj) = (0.2 * i as f64, 0.2 * j as f64);
            if reflect {
                // reflection reverses the motion without changing the mode,
                // so composition only holds away from the walls
                let (m, c) = s.split(x);
                let end = c as f64 + if m == 0 { 2.0 } else { -1.0 } * (i + j) as f64;
                prop_assume!((0.0..=9.0).contains(&end));
            }
            prop_assert_eq!(s.flow(s.flow(x, si), tj), s.flow(x, si + tj));
        }
    }
}
