use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn demo(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demos").join(name)
}

fn pdmg(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdmg"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("PDMG_OUT_DIR")
        .output()
        .expect("spawn pdmg")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Parses a solution CSV into rows of named cells.
fn rows(csv: &str) -> Vec<Vec<(String, String)>> {
    let mut lines = csv.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_string).collect();
    lines.map(|l| header.iter().cloned().zip(l.split(',').map(str::to_string)).collect()).collect()
}

fn cell<'a>(row: &'a [(String, String)], name: &str) -> &'a str {
    &row.iter().find(|(h, _)| h == name).unwrap().1
}

#[test]
fn validate_demo_succeeds_and_writes_manifest() {
    let dir = TempDir::new().unwrap();
    let out = pdmg(dir.path(), &["validate", "--model", path_str(&demo("two_state_game.json"))]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "validate");
    assert_eq!(manifest["passed"], true);
    assert!(dir.path().join("validate.json").exists());
}

#[test]
fn negative_rate_names_the_field() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("bad.json");
    fs::write(
        &model,
        r#"{"lambda": 1, "horizon": 1, "states": {"finite": ["1", "2"]},
            "rates": [{"from": "1", "to": "2", "rate": -0.5}]}"#,
    )
    .unwrap();
    let out = pdmg(dir.path(), &["validate", "--model", path_str(&model)]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("rates[0]"), "{}", text(&out.stderr));
}

#[test]
fn model_without_lyapunov_data_skips_assumptions() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("plain.json");
    fs::write(&model, r#"{"lambda": 1, "horizon": 1, "states": {"finite": ["a"]}}"#).unwrap();
    let out = pdmg(dir.path(), &["validate", "--model", path_str(&model)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("assumptions: skipped"));
}

#[test]
fn malformed_json_exits_with_input_code() {
    let dir = TempDir::new().unwrap();
    let model = dir.path().join("broken.json");
    fs::write(&model, "{").unwrap();
    let out = pdmg(dir.path(), &["validate", "--model", path_str(&model)]);
    assert_eq!(out.status.code(), Some(2));
    let missing = pdmg(dir.path(), &["validate", "--model", path_str(&dir.path().join("absent.json"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn constant_cost_value_is_exponential() {
    // lambda = 0.5, c = 2, T = 1: phi(0) = e^{lambda c T} = e, risk value c T = 2
    let dir = TempDir::new().unwrap();
    let out = pdmg(dir.path(), &["solve", "--model", path_str(&demo("constant_cost.json")), "--steps", "100"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    let first = &rows(&csv)[0];
    assert_eq!(cell(first, "t"), "0");
    let phi: f64 = cell(first, "phi").parse().unwrap();
    assert!((phi - std::f64::consts::E).abs() < 1e-10, "{phi}");
    let rv: f64 = cell(first, "risk_value").parse().unwrap();
    assert!((rv - 2.0).abs() < 1e-10, "{rv}");
}

#[test]
fn matching_pennies_mixes_evenly() {
    let dir = TempDir::new().unwrap();
    let out = pdmg(dir.path(), &["solve", "--model", path_str(&demo("matching_pennies.json")), "--steps", "50"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("solution.csv")).unwrap();
    let all = rows(&csv);
    for row in &all[..all.len() - 1] {
        for name in ["mu_0", "mu_1", "nu_0", "nu_1"] {
            let p: f64 = cell(row, name).parse().unwrap();
            assert!((p - 0.5).abs() < 1e-9, "{name} = {p}");
        }
    }
    // no decision at the horizon
    assert_eq!(cell(all.last().unwrap(), "mu_0"), "");
}

#[test]
fn too_few_steps_reports_the_requirement() {
    let dir = TempDir::new().unwrap();
    let out = pdmg(dir.path(), &["solve", "--model", path_str(&demo("grid_flow.json")), "--steps", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("use at least"), "{}", text(&out.stderr));
}

#[test]
fn simulation_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let model = demo("two_state_game.json");
    let solve = pdmg(dir.path(), &["solve", "--model", path_str(&model), "--steps", "100"]);
    assert!(solve.status.success(), "{}", text(&solve.stderr));
    let strategies = dir.path().join("solution.csv");
    let run = |sub: &str| {
        let out_dir = dir.path().join(sub);
        let args = [
            "simulate",
            "--model",
            path_str(&model),
            "--strategies",
            path_str(&strategies),
            "--x0",
            "calm",
            "--paths",
            "500",
            "--seed",
            "7",
            "--dump",
            "3",
        ];
        let out = pdmg(&out_dir, &args);
        assert!(out.status.success(), "{}", text(&out.stderr));
        (
            fs::read_to_string(out_dir.join("estimate.json")).unwrap(),
            fs::read_to_string(out_dir.join("trajectories.csv")).unwrap(),
        )
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    assert!(a.1.starts_with("path_id,jump_index,time,state,exponent_so_far\n0,0,0,calm,0\n"));
}

#[test]
fn verify_accepts_a_solution_and_rejects_negative_phi() {
    let dir = TempDir::new().unwrap();
    let model = demo("two_state_game.json");
    let solve = pdmg(dir.path(), &["solve", "--model", path_str(&model), "--steps", "200"]);
    assert!(solve.status.success(), "{}", text(&solve.stderr));
    let good = dir.path().join("solution.csv");
    let ok = pdmg(&dir.path().join("ok"), &["verify", "--model", path_str(&model), "--field", path_str(&good)]);
    assert!(ok.status.success(), "{}{}", text(&ok.stdout), text(&ok.stderr));

    // flip the sign of one phi entry
    let csv = fs::read_to_string(&good).unwrap();
    let mut lines: Vec<String> = csv.lines().map(str::to_string).collect();
    let mut cells: Vec<String> = lines[5].split(',').map(str::to_string).collect();
    cells[2] = format!("-{}", cells[2]);
    lines[5] = cells.join(",");
    let bad = dir.path().join("corrupt.csv");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = pdmg(&dir.path().join("bad"), &["verify", "--model", path_str(&model), "--field", path_str(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("FAIL positivity"), "{}", text(&out.stdout));
}

#[test]
fn ladder_past_saturation_is_flat() {
    // V <= 8 everywhere and costs stay below the cap, so levels 8 and 9
    // both leave the model untouched
    let dir = TempDir::new().unwrap();
    let model = demo("lyapunov_ladder.json");
    let args = [
        "ladder",
        "--model",
        path_str(&model),
        "--n-list",
        "8,9",
        "--steps",
        "200",
        "--kind",
        "nonneg",
    ];
    let out = pdmg(dir.path(), &args);
    assert!(out.status.success(), "{}{}", text(&out.stdout), text(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ladder.json")).unwrap()).unwrap();
    assert_eq!(report["converged_gap"], 0.0);
    assert_eq!(report["levels"][0]["phi_at_probe"], report["levels"][1]["phi_at_probe"]);
}

#[test]
fn matrix_game_command_reports_value() {
    let dir = TempDir::new().unwrap();
    let matrix = dir.path().join("m.csv");
    // saddle point at (row 1, col 0) with value 2
    fs::write(&matrix, "1,0\n2,3\n").unwrap();
    let out = pdmg(dir.path(), &["game", "--matrix", path_str(&matrix)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let sol: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("game.json")).unwrap()).unwrap();
    assert!((sol["value"].as_f64().unwrap() - 2.0).abs() < 1e-12);
}
