//! Exact solution of finite zero-sum matrix games.
//!
//! The row player maximizes, the column player minimizes. Games are reduced
//! to the standard linear program on a positively shifted payoff matrix and
//! solved with a dense simplex using Bland's rule; the row player's mixture
//! is read off the slack duals of the final tableau.

use serde::Serialize;

use crate::{model::check_simplex, Error, Result};

pub const DEFAULT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGame {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GameSolution {
    pub value: f64,
    pub row_mix: Vec<f64>,
    pub col_mix: Vec<f64>,
    /// Certified duality gap: the row mixture guarantees at least
    /// `value - gap`, the column mixture concedes at most `value + gap`.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Row,
    Column,
}

impl MatrixGame {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "payoff matrix needs {rows}x{cols} >= 1x1 entries, got {}",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: k / cols, col: k % cols });
        }
        Ok(MatrixGame { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Validation("ragged payoff matrix".into()));
        }
        Self::new(m, n, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `A nu`: the payoff of each pure row against a column mixture.
    pub fn row_payoffs(&self, nu: &[f64]) -> Vec<f64> {
        self.data
            .chunks(self.cols)
            .map(|r| r.iter().zip(nu).map(|(a, q)| a * q).sum())
            .collect()
    }

    /// `mu^T A`: the payoff of each pure column against a row mixture.
    pub fn col_payoffs(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &p) in self.data.chunks(self.cols).zip(mu) {
            for (o, a) in out.iter_mut().zip(r) {
                *o += p * a;
            }
        }
        out
    }

    pub fn bilinear(&self, mu: &[f64], nu: &[f64]) -> f64 {
        self.row_payoffs(nu).iter().zip(mu).map(|(v, p)| v * p).sum()
    }

    fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn argmax(v: &[f64]) -> (f64, usize) {
    let mut best = (v[0], 0);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > best.0 {
            best = (x, i);
        }
    }
    best
}

fn argmin(v: &[f64]) -> (f64, usize) {
    let mut best = (v[0], 0);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < best.0 {
            best = (x, i);
        }
    }
    best
}

fn pure(len: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[i] = 1.0;
    v
}

/// Exact pure best response to `opponent` (a column mixture when `side` is
/// `Row`, a row mixture when it is `Column`). Ties go to the lowest index.
pub fn best_response_value(game: &MatrixGame, side: Side, opponent: &[f64]) -> Result<(f64, usize)> {
    match side {
        Side::Row => {
            check_simplex(opponent, game.cols, "column mixture")?;
            Ok(argmax(&game.row_payoffs(opponent)))
        }
        Side::Column => {
            check_simplex(opponent, game.rows, "row mixture")?;
            Ok(argmin(&game.col_payoffs(opponent)))
        }
    }
}

/// Solves the game and certifies the result; fails when the duality gap of
/// the returned mixtures exceeds `tol * max(1, max|A|)`.
pub fn solve(game: &MatrixGame, tol: f64) -> Result<GameSolution> {
    let (m, n) = (game.rows, game.cols);
    let (row_mix, col_mix) = if m == 1 {
        (vec![1.0], pure(n, argmin(&game.data).1))
    } else if n == 1 {
        (pure(m, argmax(&game.data).1), vec![1.0])
    } else if let Some((i, j)) = pure_saddle(game) {
        (pure(m, i), pure(n, j))
    } else {
        simplex_mixes(game)?
    };
    let lower = argmin(&game.col_payoffs(&row_mix)).0;
    let upper = argmax(&game.row_payoffs(&col_mix)).0;
    let value = game.bilinear(&row_mix, &col_mix);
    let gap = (value - lower).max(upper - value).max(0.0);
    if gap > tol * game.max_abs().max(1.0) {
        return Err(Error::Validation(format!(
            "matrix game duality gap {gap:e} exceeds tolerance {tol:e}"
        )));
    }
    Ok(GameSolution { value, row_mix, col_mix, gap })
}

/// A pure saddle point: an entry that is the minimum of its row and the
/// maximum of its column.
fn pure_saddle(game: &MatrixGame) -> Option<(usize, usize)> {
    let row_mins: Vec<(f64, usize)> = game.data.chunks(game.cols).map(argmin).collect();
    let (lo, i) = argmax(&row_mins.iter().map(|r| r.0).collect::<Vec<_>>());
    let col_max: Vec<f64> = (0..game.cols)
        .map(|j| (0..game.rows).map(|r| game.get(r, j)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let (hi, j) = argmin(&col_max);
    (lo == hi).then_some((i, j))
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Column LP: maximize sum(y) s.t. A' y <= 1, y >= 0 with A' = A - min + 1.
fn simplex_mixes(game: &MatrixGame) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, n) = (game.rows, game.cols);
    let min = game.data.iter().copied().fold(f64::INFINITY, f64::min);
    let width = n + m + 1;
    // constraint rows, then the objective row (reduced costs) last
    let mut t = vec![0.0; (m + 1) * width];
    for i in 0..m {
        for j in 0..n {
            t[i * width + j] = game.get(i, j) - min + 1.0;
        }
        t[i * width + n + i] = 1.0;
        t[i * width + n + m] = 1.0;
    }
    for j in 0..n {
        t[m * width + j] = -1.0;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let eps = 1e-12;
    let cap = 50 * (m + n) + 1000;
    let mut iterations = 0;
    while let Some(enter) = (0..n + m).find(|&j| t[m * width + j] < -eps) {
        iterations += 1;
        if iterations > cap {
            return Err(Error::LpFailure { iterations: cap });
        }
        let mut leave: Option<(f64, usize)> = None;
        for i in 0..m {
            let a = t[i * width + enter];
            if a > eps {
                let ratio = t[i * width + n + m] / a;
                let better = match leave {
                    None => true,
                    Some((r, l)) => ratio < r - eps || (ratio <= r + eps && basis[i] < basis[l]),
                };
                if better {
                    leave = Some((ratio, i));
                }
            }
        }
        // the feasible region is bounded because A' > 0
        let Some((_, row)) = leave else {
            return Err(Error::LpFailure { iterations });
        };
        pivot(&mut t, width, m + 1, row, enter);
        basis[row] = enter;
    }
    let mut y = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            y[b] = t[i * width + n + m];
        }
    }
    let x: Vec<f64> = (0..m).map(|i| t[m * width + n + i]).collect();
    Ok((normalize(x), normalize(y)))
}

fn pivot(t: &mut [f64], width: usize, rows: usize, row: usize, col: usize) {
    let p = t[row * width + col];
    for v in &mut t[row * width..(row + 1) * width] {
        *v /= p;
    }
    let pivot_row: Vec<f64> = t[row * width..(row + 1) * width].to_vec();
    for r in 0..rows {
        if r == row {
            continue;
        }
        let f = t[r * width + col];
        if f == 0.0 {
            continue;
        }
        for (v, p) in t[r * width..(r + 1) * width].iter_mut().zip(&pivot_row) {
            *v -= f * p;
        }
        t[r * width + col] = 0.0;
    }
}
