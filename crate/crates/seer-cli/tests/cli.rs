//! End-to-end checks of the command-line surface through the real binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn seer() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seer"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    seer()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, content).unwrap();
    path
}

/// The ε-perturbed instance: x1, x2, z mutually orthonormal under uniform
/// weights; y1 = x1, y2 = y3 = z + 0.01·x2.
fn divergence_csv() -> String {
    let eps = 0.01;
    let x1 = [1.0, 1.0, -1.0, -1.0];
    let x2 = [1.0, -1.0, 1.0, -1.0];
    let z = [1.0, -1.0, -1.0, 1.0];
    let mut out = String::from("town,x1,x2,z,y1,y2,y3\n");
    for i in 0..4 {
        let y2 = z[i] + eps * x2[i];
        out.push_str(&format!(
            "t{},{},{},{},{},{},{}\n",
            i + 1,
            x1[i],
            x2[i],
            z[i],
            x1[i],
            y2,
            y2
        ));
    }
    out
}

fn divergence_config(algorithm: &str) -> String {
    format!(
        r#"[dataset]
csv = "towns.csv"

[[group]]
name = "gx"
variables = ["x1", "x2"]
components = 1

[[group]]
name = "gz"
variables = ["z"]
components = 1

[[group]]
name = "gy"
variables = ["y1", "y2", "y3"]
components = 1

[model]
dependent = "gy"
algorithm = "{algorithm}"
"#
    )
}

fn load_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn component_loading(result: &Value, group: &str, rank: u64) -> Vec<f64> {
    result["groups"]
        .as_array()
        .unwrap()
        .iter()
        .find(|g| g["name"] == group)
        .expect("group present")["components"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["rank"] == rank)
        .expect("component present")["loading"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect()
}

#[test]
fn fit_recovers_known_rank1_solution() {
    // y = (x1 + x2)/√2 on the orthonormal pair: u = (1/√2, 1/√2), λ = 1.
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("x1,x2,y\n");
    let x1 = [1.0, 1.0, -1.0, -1.0];
    let x2 = [1.0, -1.0, 1.0, -1.0];
    for i in 0..4 {
        let y = (x1[i] + x2[i]) / 2f64.sqrt();
        csv.push_str(&format!("{},{},{}\n", x1[i], x2[i], y));
    }
    write(dir.path(), "data.csv", &csv);
    write(
        dir.path(),
        "model.toml",
        r#"[dataset]
csv = "data.csv"

[[group]]
name = "gx"
variables = ["x1", "x2"]
components = 1

[[group]]
name = "gy"
variables = ["y"]

[model]
dependent = "gy"
algorithm = "pls1"
"#,
    );
    let out = run(&["fit", "--config", "model.toml", "--out", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result = load_json(&dir.path().join("out/result.json"));
    let loading = component_loading(&result, "gx", 1);
    let expected = 1.0 / 2f64.sqrt();
    assert!((loading[0] - expected).abs() < 1e-12);
    assert!((loading[1] - expected).abs() < 1e-12);
    let eigenvalue = result["groups"][0]["components"][0]["eigenvalue"]
        .as_f64()
        .unwrap();
    assert!((eigenvalue - 1.0).abs() < 1e-12);
    // Observation ids fall back to row numbers: no free text column here.
    assert_eq!(result["observation_ids"][0], "1");
}

#[test]
fn summed_and_codetermined_fits_diverge_on_the_eps_instance() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "towns.csv", &divergence_csv());
    write(dir.path(), "a3.toml", &divergence_config("seer_a3"));
    write(dir.path(), "b2.toml", &divergence_config("seer_b2"));

    let out = run(&["fit", "--config", "a3.toml", "--out", "a3"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let a3 = load_json(&dir.path().join("a3/result.json"));
    let la3 = component_loading(&a3, "gx", 1);
    // Summed criterion picks x1.
    assert!(la3[0].abs() / (la3[0].powi(2) + la3[1].powi(2)).sqrt() > 0.99);

    let out = run(&["fit", "--config", "b2.toml", "--out", "b2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let b2 = load_json(&dir.path().join("b2/result.json"));
    let lb2 = component_loading(&b2, "gx", 1);
    // Co-determination picks x2.
    assert!(lb2[1].abs() / (lb2[0].powi(2) + lb2[1].powi(2)).sqrt() > 0.99);
}

#[test]
fn ingest_errors_name_the_offending_entity() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "towns.csv", &divergence_csv());

    // Missing variable.
    let cfg = divergence_config("seer_a3").replace("\"x2\"", "\"nope\"");
    write(dir.path(), "missing.toml", &cfg);
    let out = run(&["fit", "--config", "missing.toml", "--out", "o1"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    // Non-numeric cell: corrupt the first z value (row 2 of the file).
    let bad_csv = divergence_csv().replacen("t1,1,1,1,", "t1,1,1,oops,", 1);
    write(dir.path(), "bad.csv", &bad_csv);
    let cfg = divergence_config("seer_a3").replace("towns.csv", "bad.csv");
    write(dir.path(), "bad.toml", &cfg);
    let out = run(&["fit", "--config", "bad.toml", "--out", "o2"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("oops") && stderr.contains('z') && stderr.contains("row 2"),
        "{stderr}"
    );

    // A variable assigned to two groups.
    let cfg = divergence_config("seer_a3").replace("variables = [\"z\"]", "variables = [\"x1\"]");
    write(dir.path(), "dup.toml", &cfg);
    let out = run(&["fit", "--config", "dup.toml", "--out", "o3"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("x1"));

    // Constant column.
    let mut const_csv = String::from("town,x1,x2,z,y1,y2,y3\n");
    for line in divergence_csv().lines().skip(1) {
        let mut cells: Vec<&str> = line.split(',').collect();
        cells[2] = "5";
        const_csv.push_str(&cells.join(","));
        const_csv.push('\n');
    }
    write(dir.path(), "const.csv", &const_csv);
    let cfg = divergence_config("seer_a3").replace("towns.csv", "const.csv");
    write(dir.path(), "const.toml", &cfg);
    let out = run(&["fit", "--config", "const.toml", "--out", "o5"], dir.path());
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("x2") && stderr.contains("variance"), "{stderr}");

    // Non-positive weight.
    let mut weighted = String::from("town,wgt,x1,x2,z,y1,y2,y3\n");
    for (i, line) in divergence_csv().lines().skip(1).enumerate() {
        let rest = line.split_once(',').unwrap().1;
        let w = if i == 2 { "0" } else { "1" };
        weighted.push_str(&format!("t{},{w},{rest}\n", i + 1));
    }
    write(dir.path(), "weighted.csv", &weighted);
    let cfg = divergence_config("seer_a3").replace(
        "csv = \"towns.csv\"",
        "csv = \"weighted.csv\"\nweight_column = \"wgt\"",
    );
    write(dir.path(), "weighted.toml", &cfg);
    let out = run(
        &["fit", "--config", "weighted.toml", "--out", "o4"],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wgt"));
}

#[test]
fn plane_exports_reload_exactly_and_stay_bounded() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "towns.csv", &divergence_csv());
    write(dir.path(), "model.toml", &divergence_config("seer_a3"));
    let out = run(
        &[
            "fit",
            "--config",
            "model.toml",
            "--out",
            "direct",
            "--planes",
            "gx:1,1",
            "--all-variables",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Re-derive the same plane from the reloaded machine result: byte-equal
    // output means the reload reproduced every score exactly.
    let out = run(
        &[
            "planes",
            "--config",
            "model.toml",
            "--fit",
            "direct/result.json",
            "--pair",
            "gx:1,1",
            "--all-variables",
            "--out",
            "reloaded",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let direct = fs::read(dir.path().join("direct/plane_gx_1_1.tsv")).unwrap();
    let reloaded = fs::read(dir.path().join("reloaded/plane_gx_1_1.tsv")).unwrap();
    assert_eq!(direct, reloaded);

    // Bounded correlations and a perfectly aligned variable.
    let text = String::from_utf8(direct).unwrap();
    let mut x1_corr = None;
    for line in text.lines().skip(1) {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells[0] == "variable" {
            for value in &cells[2..] {
                let v: f64 = value.parse().unwrap();
                assert!(v.abs() <= 1.0 + 1e-12);
            }
            if cells[1] == "x1" {
                x1_corr = Some(cells[2].parse::<f64>().unwrap());
            }
        }
    }
    // The first component of the summed fit is x1 itself.
    assert!((x1_corr.unwrap().abs() - 1.0).abs() < 1e-9);
}

#[test]
fn unknown_component_in_plane_request_fails() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "towns.csv", &divergence_csv());
    write(dir.path(), "model.toml", &divergence_config("seer_a3"));
    let out = run(
        &[
            "fit",
            "--config",
            "model.toml",
            "--out",
            "out",
            "--planes",
            "gx:1,7",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gx:7"));
}

/// Walsh-pattern columns (mutually orthogonal, centred): the signal pair
/// drives both dependent variables, the noise pair drives nothing.
fn planted_noise_csv() -> String {
    let h1 = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
    let h2 = [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
    let h3 = [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
    let h4 = [1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0];
    let h5 = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
    let h6 = [1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0];
    let mut out = String::from("s1,s2,n1,n2,y1,y2\n");
    for i in 0..8 {
        let s1 = h1[i] + 0.4 * h2[i];
        let s2 = (h2[i] - 0.3 * h1[i]) * 0.9;
        let n1 = h3[i] + 0.2 * h4[i];
        let n2 = (h4[i] - 0.1 * h3[i]) * 0.8;
        let y1 = h1[i] + 0.5 * h2[i] + 0.05 * h5[i];
        let y2 = h2[i] - 0.4 * h1[i] + 0.05 * h6[i];
        out.push_str(&format!("{},{},{},{},{},{}\n", s1, s2, n1, n2, y1, y2));
    }
    out
}

#[test]
fn select_removes_planted_noise_first() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "data.csv", &planted_noise_csv());
    write(
        dir.path(),
        "model.toml",
        r#"[dataset]
csv = "data.csv"

[[group]]
name = "signal"
variables = ["s1", "s2"]
components = 2

[[group]]
name = "noise"
variables = ["n1", "n2"]
components = 2

[[group]]
name = "gy"
variables = ["y1", "y2"]

[model]
dependent = "gy"
algorithm = "select"

[options]
omega = "inv_lambda1"
target_counts = [1, 0]
"#,
    );
    let out = run(&["select", "--config", "model.toml", "--out", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(dir.path().join("out/selection.tsv")).unwrap();
    let first_step: Vec<&str> = trace.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(first_step[1], "noise");
    // target_counts [1, 0] leaves one signal component and no noise ones.
    let result = load_json(&dir.path().join("out/result.json"));
    let groups = result["groups"].as_array().unwrap();
    let count = |name: &str| {
        groups
            .iter()
            .find(|g| g["name"] == name)
            .unwrap()["components"]
            .as_array()
            .unwrap()
            .len()
    };
    assert_eq!(count("signal"), 1);
    assert_eq!(count("noise"), 0);
}

#[test]
fn explicit_vector_initialization_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "towns.csv", &divergence_csv());
    let cfg = divergence_config("seer_a3").replace(
        "algorithm = \"seer_a3\"",
        "algorithm = \"seer_a3\"\n\n[options]\ninit = { given = [[1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]] }",
    );
    write(dir.path(), "given.toml", &cfg);
    let out = run(&["fit", "--config", "given.toml", "--out", "given"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result = load_json(&dir.path().join("given/result.json"));
    let loading = component_loading(&result, "gx", 1);
    // Same fixed point as the default initialization on this instance.
    assert!(loading[0].abs() / (loading[0].powi(2) + loading[1].powi(2)).sqrt() > 0.99);
}

#[test]
fn block_inverse_metric_and_weight_column_are_wired_through() {
    let dir = tempfile::tempdir().unwrap();
    let h1 = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0];
    let h2 = [1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0];
    let h3 = [1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0];
    let h4 = [1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0];
    let mut csv = String::from("wgt,a,b,c,d,y
");
    for i in 0..8 {
        let a = h1[i] + 0.5 * h2[i];
        let b = h2[i];
        let c = h3[i] + 0.3 * h4[i];
        let d = h4[i];
        let y = h1[i] + 0.7 * h3[i];
        let wgt = 1.0 + 0.25 * (i % 3) as f64;
        csv.push_str(&format!("{},{},{},{},{},{}
", wgt, a, b, c, d, y));
    }
    write(dir.path(), "data.csv", &csv);
    write(
        dir.path(),
        "model.toml",
        r#"[dataset]
csv = "data.csv"
weight_column = "wgt"

[[group]]
name = "gx"
variables = ["a", "b", "c", "d"]
metric = "block_inverse"
blocks = [["a", "b"], ["c", "d"]]
components = 2

[[group]]
name = "gy"
variables = ["y"]

[model]
dependent = "gy"
algorithm = "seer_a3"
"#,
    );
    let out = run(&["fit", "--config", "model.toml", "--out", "out"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result = load_json(&dir.path().join("out/result.json"));
    let weights: Vec<f64> = result["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    let total: f64 = weights.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
    assert!(weights[1] > weights[0]);
    assert_eq!(component_loading(&result, "gx", 1).len(), 4);
    assert_eq!(component_loading(&result, "gx", 2).len(), 4);
}

#[test]
fn out_dir_env_variable_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "towns.csv", &divergence_csv());
    write(dir.path(), "model.toml", &divergence_config("seer_a3"));
    let out = seer()
        .args(["fit", "--config", "model.toml"])
        .env("SEER_OUT_DIR", "env-out")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("env-out/result.json").exists());
}
