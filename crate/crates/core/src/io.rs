//! CSV and JSON artifacts.
//!
//! Solution CSV: header `t,state,phi,risk_value,mu_0..,nu_0..` with one row
//! per grid knot and state, knots outermost. Mixture columns are padded to
//! the largest action count and left empty where a state has fewer actions
//! and on the final knot, where no strategy is played. All numbers carry 12
//! significant digits, so export, import and export again is byte-identical.

use std::io::Write;

use serde::Serialize;

use crate::matrix_game::MatrixGame;
use crate::model::GameModel;
use crate::numfmt::{round12, sig12};
use crate::shapley::{StrategyField, TimeGrid, ValueField};
use crate::simulate::Trajectory;
use crate::{Error, Result};

/// Simplex tolerance for imported strategies; they are not renormalized.
pub const IMPORT_SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub field: ValueField,
    pub strategies: Option<StrategyField>,
}

fn action_width(model: &GameModel) -> (usize, usize) {
    let m = (0..model.n_states()).map(|x| model.n_p1(x)).max().unwrap_or(1);
    let n = (0..model.n_states()).map(|x| model.n_p2(x)).max().unwrap_or(1);
    (m, n)
}

fn header(model: &GameModel) -> Vec<String> {
    let (m, n) = action_width(model);
    let mut h: Vec<String> = ["t", "state", "phi", "risk_value"].iter().map(|s| s.to_string()).collect();
    h.extend((0..m).map(|a| format!("mu_{a}")));
    h.extend((0..n).map(|b| format!("nu_{b}")));
    h
}

fn pad(mix: Option<&[f64]>, width: usize) -> impl Iterator<Item = String> + '_ {
    (0..width).map(move |i| mix.and_then(|p| p.get(i)).map(|&v| sig12(v)).unwrap_or_default())
}

pub fn write_solution_csv<W: Write>(
    out: W,
    model: &GameModel,
    field: &ValueField,
    strategies: Option<&StrategyField>,
) -> Result<()> {
    if field.n_states() != model.n_states() {
        return Err(Error::Schema("field and model have different state counts".into()));
    }
    if let Some(s) = strategies {
        if s.grid != field.grid || s.n_states() != field.n_states() {
            return Err(Error::Schema("strategies and values live on different grids".into()));
        }
    }
    let (m, n) = action_width(model);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(model))?;
    for k in 0..=field.grid.steps {
        let t = sig12(field.grid.t(k));
        for x in 0..model.n_states() {
            // risk value from the printed phi, so re-export reproduces it
            let phi = round12(field.at(k, x));
            let mut row = vec![t.clone(), model.states.name(x), sig12(phi), sig12(phi.ln() / model.lambda)];
            let played = strategies.filter(|_| k < field.grid.steps);
            row.extend(pad(played.map(|s| s.mu(k, x)), m));
            row.extend(pad(played.map(|s| s.nu(k, x)), n));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn solution_csv_string(model: &GameModel, field: &ValueField, strategies: Option<&StrategyField>) -> Result<String> {
    let mut buf = Vec::new();
    write_solution_csv(&mut buf, model, field, strategies)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn num(text: &str, line: usize, column: &str) -> Result<f64> {
    text.trim()
        .parse()
        .map_err(|_| Error::Schema(format!("line {line}: column {column} is not a number: {text:?}")))
}

/// Reads a solution CSV against `model`. The time grid is inferred from the
/// row count; strategies are returned when the mixture columns are filled.
pub fn read_solution_csv(text: &str, model: &GameModel) -> Result<Solution> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let expected = header(model);
    let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(Error::Schema(format!("header {got:?}, expected {expected:?}")));
    }
    let records: Vec<csv::StringRecord> = r.records().collect::<std::result::Result<_, _>>()?;
    let s = model.n_states();
    if records.len() < 2 * s || !records.len().is_multiple_of(s) {
        return Err(Error::Schema(format!("{} rows do not form a grid over {s} states", records.len())));
    }
    let steps = records.len() / s - 1;
    let grid = TimeGrid::new(steps, model.horizon)?;
    let (m, n) = action_width(model);
    let mut phi = Vec::with_capacity(records.len());
    let (mut mu, mut nu) = (Vec::new(), Vec::new());
    let mut filled = None;
    for (i, rec) in records.iter().enumerate() {
        let line = i + 2;
        let (k, x) = (i / s, i % s);
        let t = num(&rec[0], line, "t")?;
        if (t - grid.t(k)).abs() > 1e-9 * model.horizon.max(1.0) {
            return Err(Error::Schema(format!("line {line}: t = {t}, expected {}", grid.t(k))));
        }
        if rec[1] != model.states.name(x) {
            return Err(Error::Schema(format!("line {line}: state {:?}, expected {:?}", &rec[1], model.states.name(x))));
        }
        phi.push(num(&rec[2], line, "phi")?);
        let mix = |from: usize, len: usize, width: usize, who: &str| -> Result<Option<Vec<f64>>> {
            let cells: Vec<&str> = (from..from + width).map(|j| rec[j].trim()).collect();
            if cells.iter().all(|c| c.is_empty()) {
                return Ok(None);
            }
            if cells[len..].iter().any(|c| !c.is_empty()) || cells[..len].iter().any(|c| c.is_empty()) {
                return Err(Error::Schema(format!("line {line}: {who} needs exactly {len} entries")));
            }
            cells[..len].iter().map(|c| num(c, line, who)).collect::<Result<Vec<_>>>().map(Some)
        };
        let a = mix(4, model.n_p1(x), m, "mu")?;
        let b = mix(4 + m, model.n_p2(x), n, "nu")?;
        if k == steps {
            if a.is_some() || b.is_some() {
                return Err(Error::Schema(format!("line {line}: no strategy is played at the horizon")));
            }
            continue;
        }
        let has = a.is_some() && b.is_some();
        if a.is_some() != b.is_some() || *filled.get_or_insert(has) != has {
            return Err(Error::Schema(format!("line {line}: mixture columns are partially filled")));
        }
        if let (Some(a), Some(b)) = (a, b) {
            mu.push(a);
            nu.push(b);
        }
    }
    let field = ValueField::from_slices(grid, s, phi)?;
    let strategies = if filled == Some(true) {
        let st = StrategyField::new(grid, s, mu, nu)?;
        st.validate(model, IMPORT_SIMPLEX_TOL)?;
        Some(st)
    } else {
        None
    };
    Ok(Solution { field, strategies })
}

/// `path_id,jump_index,time,state,exponent_so_far`; jump index 0 is the
/// starting point.
pub fn write_trajectories_csv<W: Write>(out: W, model: &GameModel, paths: &[Trajectory]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path_id", "jump_index", "time", "state", "exponent_so_far"])?;
    for (id, p) in paths.iter().enumerate() {
        w.write_record([id.to_string(), "0".into(), sig12(p.t0), model.states.name(p.x0), "0".into()])?;
        for (j, jump) in p.jumps.iter().enumerate() {
            w.write_record([
                id.to_string(),
                (j + 1).to_string(),
                sig12(jump.time),
                model.states.name(jump.state),
                sig12(jump.exponent_so_far),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A payoff matrix as plain comma-separated rows, no header.
pub fn read_matrix_csv(text: &str) -> Result<MatrixGame> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = rec.iter().map(|c| num(c, i + 1, "payoff")).collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    MatrixGame::from_rows(&rows)
}

fn round_json(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            if let Some(r) = n.as_f64().map(round12).and_then(serde_json::Number::from_f64) {
                *n = r;
            }
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_json),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Pretty JSON with every float rounded to 12 significant digits and a
/// trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelBuilder;
    use crate::shapley::{backward_solve, SolverConfig};

    fn model() -> GameModel {
        let mut b = ModelBuilder::finite(&["s", "u"], 0.7, 1.0);
        b.action_counts(0, 3, 2).unwrap();
        b.rate(0, 0, 0, 1, 1.0).unwrap();
        b.rate(0, 2, 1, 1, 2.0).unwrap();
        b.cost(0, 0, 0, 1.0).unwrap();
        b.cost(0, 1, 1, -0.5).unwrap();
        b.cost(0, 2, 0, 0.25).unwrap();
        b.cost(1, 0, 0, 0.1).unwrap();
        b.terminal(1, 0.3).unwrap();
        b.build().unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = model();
        let (f, s) = backward_solve(&m, &SolverConfig::with_steps(30)).unwrap();
        let first = solution_csv_string(&m, &f, Some(&s)).unwrap();
        let back = read_solution_csv(&first, &m).unwrap();
        assert!(back.strategies.is_some());
        let second = solution_csv_string(&m, &back.field, back.strategies.as_ref()).unwrap();
        assert_eq!(first, second);
        assert!(first.starts_with("t,state,phi,risk_value,mu_0,mu_1,mu_2,nu_0,nu_1\n"));
        // state u has one action each: padding stays empty
        assert!(first.lines().nth(2).unwrap().ends_with(",1,,,1,"), "{first}");
        assert!(f.max_abs_diff(&back.field).unwrap() < 1e-11);

        let values_only = solution_csv_string(&m, &f, None).unwrap();
        let back = read_solution_csv(&values_only, &m).unwrap();
        assert!(back.strategies.is_none());
        assert_eq!(solution_csv_string(&m, &back.field, None).unwrap(), values_only);
    }

    #[test]
    fn import_rejects_bad_files() {
        let m = model();
        let (f, s) = backward_solve(&m, &SolverConfig::with_steps(10)).unwrap();
        let good = solution_csv_string(&m, &f, Some(&s)).unwrap();
        let bad_header = good.replacen("phi", "value", 1);
        assert!(matches!(read_solution_csv(&bad_header, &m), Err(Error::Schema(_))));
        let short: String = good.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_solution_csv(&short, &m), Err(Error::Schema(_))));
        // a mixture that misses the simplex by 1e-6 is not renormalized
        let lines: Vec<&str> = good.lines().collect();
        let mut cells: Vec<String> = lines[1].split(',').map(str::to_string).collect();
        cells[4] = "1.000001".into();
        cells[5] = "0".into();
        cells[6] = "0".into();
        let mut broken = lines.clone();
        let row = cells.join(",");
        broken[1] = &row;
        let text = broken.join("\n") + "\n";
        assert!(matches!(read_solution_csv(&text, &m), Err(Error::Simplex(_))));
    }

    #[test]
    fn negative_phi_is_importable() {
        let m = model();
        let grid = TimeGrid::new(1, 1.0).unwrap();
        let f = ValueField::from_slices(grid, 2, vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let text = solution_csv_string(&m, &f, None).unwrap();
        assert!(text.contains(",-1,NaN,"), "{text}");
        assert_eq!(read_solution_csv(&text, &m).unwrap().field, f);
    }

    #[test]
    fn matrix_csv() {
        let g = read_matrix_csv("3, 1\n0, 2\n").unwrap();
        assert_eq!((g.rows(), g.cols(), g.get(1, 1)), (2, 2, 2.0));
        assert!(read_matrix_csv("1,x\n").is_err());
        assert!(read_matrix_csv("1,2\n3\n").is_err());
    }

    #[test]
    fn json_rounds_floats() {
        #[derive(Serialize)]
        struct S {
            a: f64,
            n: usize,
            v: Vec<f64>,
        }
        let s = to_json(&S { a: 0.1 + 0.2, n: 7, v: vec![1.0 / 3.0] }).unwrap();
        assert_eq!(s, "{\n  \"a\": 0.3,\n  \"n\": 7,\n  \"v\": [\n    0.333333333333\n  ]\n}\n");
    }
}
