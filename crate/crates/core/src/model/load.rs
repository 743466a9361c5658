//! JSON model documents.
//!
//! States are referenced by name (`"mode@cell"` on grid flows), actions by
//! label or zero-based index. `"*"` expands to every state or action; on grid
//! flows `"mode@*"` expands to every cell of a mode and a target written
//! `"mode@="` means "same cell as the source".

use std::path::Path;

use serde::Deserialize;

use super::{Boundary, GridFlow, LyapunovData, Mode, ModelBuilder, StateSpace};
use crate::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    lambda: f64,
    horizon: f64,
    states: StatesDoc,
    #[serde(default)]
    actions: Vec<ActionsDoc>,
    #[serde(default)]
    rates: Vec<RateDoc>,
    #[serde(default)]
    costs: Vec<CostDoc>,
    #[serde(default)]
    terminal: Vec<TerminalDoc>,
    lyapunov: Option<LyapunovDoc>,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum StatesDoc {
    Finite(Vec<String>),
    GridFlow(GridDoc),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    modes: Vec<ModeDoc>,
    grid: RangeDoc,
    #[serde(default)]
    boundary: Boundary,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeDoc {
    name: String,
    drift: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RangeDoc {
    min: f64,
    max: f64,
    cells: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ActionList {
    Count(usize),
    Labels(Vec<String>),
}

impl ActionList {
    fn labels(&self) -> Vec<String> {
        match self {
            ActionList::Count(k) => (0..*k).map(|i| i.to_string()).collect(),
            ActionList::Labels(v) => v.clone(),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ActionsDoc {
    state: String,
    #[serde(default)]
    p1: Option<ActionList>,
    #[serde(default)]
    p2: Option<ActionList>,
}

#[derive(Deserialize, Clone)]
#[serde(untagged)]
enum ActionRef {
    Index(usize),
    Label(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RateDoc {
    from: String,
    #[serde(default = "any_action")]
    a: ActionRef,
    #[serde(default = "any_action")]
    b: ActionRef,
    to: String,
    rate: f64,
    #[serde(default)]
    segments: Vec<RateSegment>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RateSegment {
    t_start: f64,
    #[serde(alias = "rates")]
    rate: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostDoc {
    state: String,
    #[serde(default = "any_action")]
    a: ActionRef,
    #[serde(default = "any_action")]
    b: ActionRef,
    value: f64,
    #[serde(default)]
    segments: Vec<CostSegment>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CostSegment {
    t_start: f64,
    value: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TerminalDoc {
    state: String,
    value: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PerState {
    Const(f64),
    List(Vec<f64>),
}

impl PerState {
    fn expand(self, n: usize) -> Vec<f64> {
        match self {
            PerState::Const(v) => vec![v; n],
            PerState::List(v) => v,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LyapunovDoc {
    #[serde(rename = "V")]
    v: PerState,
    #[serde(rename = "V1")]
    v1: PerState,
    rho1: f64,
    b1: f64,
    #[serde(rename = "M1")]
    m1: f64,
    #[serde(rename = "M2")]
    m2: f64,
    kappa: f64,
    rho2: f64,
    #[serde(rename = "M3")]
    m3: f64,
    b2: f64,
}

fn any_action() -> ActionRef {
    ActionRef::Label("*".into())
}

pub fn load_model_file(path: &Path) -> Result<super::GameModel> {
    let text = std::fs::read_to_string(path)?;
    load_model(&text)
}

pub fn load_model(text: &str) -> Result<super::GameModel> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ModelDoc = serde_path_to_error::deserialize(de).map_err(|e| {
        // syntax errors have no field path
        let path = match e.path().to_string() {
            p if p == "?" => "(document)".to_string(),
            p => p,
        };
        Error::Parse { path, message: e.inner().to_string() }
    })?;
    build(doc)
}

fn at(path: String) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Validation(m) => Error::Validation(format!("{path}: {m}")),
        other => other,
    }
}

fn build(doc: ModelDoc) -> Result<super::GameModel> {
    let states = match doc.states {
        StatesDoc::Finite(names) => StateSpace::Finite(names),
        StatesDoc::GridFlow(g) => StateSpace::GridFlow(GridFlow {
            modes: g.modes.into_iter().map(|m| Mode { name: m.name, drift: m.drift }).collect(),
            min: g.grid.min,
            max: g.grid.max,
            cells: g.grid.cells,
            boundary: g.boundary,
        }),
    };
    super::validate_space(&states).map_err(at("states".into()))?;
    let n = states.len();
    let mut b = ModelBuilder::new(states, doc.lambda, doc.horizon);

    for (i, entry) in doc.actions.iter().enumerate() {
        let path = format!("actions[{i}]");
        for x in resolve_states(b.states(), &entry.state).map_err(at(format!("{path}.state")))? {
            let p1 = entry.p1.as_ref().map_or_else(|| b.p1_labels(x).to_vec(), ActionList::labels);
            let p2 = entry.p2.as_ref().map_or_else(|| b.p2_labels(x).to_vec(), ActionList::labels);
            b.actions(x, p1, p2).map_err(at(path.clone()))?;
        }
    }

    for (i, r) in doc.rates.iter().enumerate() {
        let path = format!("rates[{i}]");
        let pieces: Vec<(f64, f64)> = r.segments.iter().map(|s| (s.t_start, s.rate)).collect();
        let sources = resolve_states(b.states(), &r.from).map_err(at(format!("{path}.from")))?;
        let expanded = sources.len() > 1;
        for x in sources {
            let to = resolve_target(b.states(), &r.to, x).map_err(at(format!("{path}.to")))?;
            if expanded && to == x {
                // a wildcard source that hits its own target contributes nothing
                continue;
            }
            let la = resolve_actions(b.p1_labels(x), &r.a).map_err(at(format!("{path}.a")))?;
            let lb = resolve_actions(b.p2_labels(x), &r.b).map_err(at(format!("{path}.b")))?;
            for &a in &la {
                for &bb in &lb {
                    b.rate_segments(x, a, bb, to, r.rate, pieces.clone()).map_err(at(path.clone()))?;
                }
            }
        }
    }

    for (i, c) in doc.costs.iter().enumerate() {
        let path = format!("costs[{i}]");
        let pieces: Vec<(f64, f64)> = c.segments.iter().map(|s| (s.t_start, s.value)).collect();
        for x in resolve_states(b.states(), &c.state).map_err(at(format!("{path}.state")))? {
            let la = resolve_actions(b.p1_labels(x), &c.a).map_err(at(format!("{path}.a")))?;
            let lb = resolve_actions(b.p2_labels(x), &c.b).map_err(at(format!("{path}.b")))?;
            for &a in &la {
                for &bb in &lb {
                    b.cost_segments(x, a, bb, c.value, pieces.clone()).map_err(at(path.clone()))?;
                }
            }
        }
    }

    for (i, t) in doc.terminal.iter().enumerate() {
        let path = format!("terminal[{i}]");
        for x in resolve_states(b.states(), &t.state).map_err(at(format!("{path}.state")))? {
            b.terminal(x, t.value).map_err(at(path.clone()))?;
        }
    }

    if let Some(l) = doc.lyapunov {
        b.lyapunov(LyapunovData {
            v: l.v.expand(n),
            v1: l.v1.expand(n),
            rho1: l.rho1,
            b1: l.b1,
            m1: l.m1,
            m2: l.m2,
            kappa: l.kappa,
            rho2: l.rho2,
            m3: l.m3,
            b2: l.b2,
        });
    }
    b.build()
}

fn unknown(kind: &str, name: &str) -> Error {
    Error::Validation(format!("unknown {kind} '{name}'"))
}

fn resolve_states(space: &StateSpace, pattern: &str) -> Result<Vec<usize>> {
    if pattern == "*" {
        return Ok((0..space.len()).collect());
    }
    if let StateSpace::GridFlow(g) = space {
        if let Some(mode) = pattern.strip_suffix("@*") {
            let m = g
                .modes
                .iter()
                .position(|md| md.name == mode)
                .ok_or_else(|| unknown("mode", mode))?;
            return Ok((0..g.cells).map(|c| space.join(m, c)).collect());
        }
    }
    space.index_of(pattern).map(|x| vec![x]).ok_or_else(|| unknown("state", pattern))
}

fn resolve_target(space: &StateSpace, pattern: &str, from: usize) -> Result<usize> {
    if let StateSpace::GridFlow(g) = space {
        if let Some(mode) = pattern.strip_suffix("@=") {
            let m = g
                .modes
                .iter()
                .position(|md| md.name == mode)
                .ok_or_else(|| unknown("mode", mode))?;
            return Ok(space.join(m, space.split(from).1));
        }
    }
    space.index_of(pattern).ok_or_else(|| unknown("state", pattern))
}

fn resolve_actions(labels: &[String], r: &ActionRef) -> Result<Vec<usize>> {
    match r {
        ActionRef::Index(i) if *i < labels.len() => Ok(vec![*i]),
        ActionRef::Index(i) => Err(Error::Validation(format!("action index {i} out of range"))),
        ActionRef::Label(s) if s == "*" => Ok((0..labels.len()).collect()),
        ActionRef::Label(s) => labels
            .iter()
            .position(|l| l == s)
            .map(|i| vec![i])
            .ok_or_else(|| unknown("action", s)),
    }
}
