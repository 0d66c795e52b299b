use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[data]
num_classes = 4
samples_per_class = 60
dim = 4
tasks = 2

[training]
hidden = [8]

[memory]
capacity = 20

[perturbation]
count = 3

[federation]
clients = 3
burn_in = 2
q = 2
"#;

fn ofcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofcl")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

/// Final-row mean of an `acc_matrix_k.csv`.
fn last_row_mean(csv: &str) -> f64 {
    let last = csv.lines().last().unwrap();
    let cells: Vec<f64> = last.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
    cells.iter().sum::<f64>() / cells.len() as f64
}

#[test]
fn run_writes_consistent_report() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = tmp.path().join("out");

    let result = ofcl(&["run", path(&config), "--out", path(&out)]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    for name in ["summary.json", "per_client.csv", "rounds.log", "acc_matrix_0.csv", "acc_matrix_2.csv"] {
        assert!(out.join(name).exists(), "missing {name}");
    }

    let per_client = fs::read_to_string(out.join("per_client.csv")).unwrap();
    assert_eq!(per_client.lines().count(), 1 + 3);

    let means: Vec<f64> = (0..3)
        .map(|k| last_row_mean(&fs::read_to_string(out.join(format!("acc_matrix_{k}.csv"))).unwrap()))
        .collect();
    let recomputed = means.iter().sum::<f64>() / 3.0;
    let reported = summary(&out)["A"].as_f64().unwrap();
    assert!((recomputed - reported).abs() < 1e-12, "{recomputed} vs {reported}");

    let rounds = fs::read_to_string(out.join("rounds.log")).unwrap();
    assert!(rounds.lines().count() > 0);
    assert!(rounds.lines().all(|l| l.starts_with("round=")));

    let again = ofcl(&["run", path(&config), "--out", path(&out)]);
    assert!(!again.status.success());

    let forced = tmp.path().join("forced");
    fs::create_dir(&forced).unwrap();
    fs::write(forced.join("stale"), "x").unwrap();
    let rerun = ofcl(&["run", path(&config), "--out", path(&forced), "--force", "--parallel"]);
    assert!(rerun.status.success());
    assert_eq!(
        fs::read_to_string(out.join("summary.json")).unwrap(),
        fs::read_to_string(forced.join("summary.json")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = tmp.path().join("out");
    assert!(ofcl(&["run", path(&config), "--seed", "11", "--out", path(&out)]).status.success());
    assert_eq!(summary(&out)["seed"].as_u64(), Some(11));
}

#[test]
fn invalid_config_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "[federation]\nclients = 0\n").unwrap();
    let result = ofcl(&["run", path(&config), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&result.stderr).contains("federation.clients"));

    let missing = ofcl(&["run", path(&tmp.path().join("nope.toml"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn grid_runs_every_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("a.toml"), SMALL).unwrap();
    fs::write(tmp.path().join("b.toml"), SMALL.replace("capacity = 20", "capacity = 0")).unwrap();
    let result = ofcl(&["grid", path(tmp.path())]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    for name in ["a", "b"] {
        assert!(tmp.path().join("results").join(name).join("summary.json").exists());
    }
}

#[test]
fn dump_memory_prints_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let result = ofcl(&["dump-memory", path(&config), "--client", "1"]);
    assert!(result.status.success());
    let text = String::from_utf8(result.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# client 1"));
    assert!(lines.next().unwrap().starts_with("class_id,task_id,score,f0"));
    let rows = lines.count();
    assert!(rows > 0 && rows <= 20, "{rows} rows");
}
