use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_fedbatch");

const CONFIG: &str = r#"
seed = 4
rounds = 8
[data]
dim = 6
classes = 3
train_per_class = 60
test_per_class = 20
[clients]
count = 3
speeds = [50.0, 100.0, 200.0]
upload_times = 1.0
[budget]
cost = 10.0
time = 500.0
[controller]
kind = "dynamite"
"#;

const INSTANCE: &str = r#"
rounds = 5
tau_max = 4
[params]
rho = 1.0
beta = 1.0
c = 0.5
delta = 0.2
eta = 0.01
[budget]
cost = 5.0
time = 100.0
cost_per_sample = 0.01
cost_per_round = 0.2
[[client]]
speed = 20.0
upload_time = 1.0
data = 30
variance = 1.0
compute_time = 0.5
[[client]]
speed = 20.0
upload_time = 1.0
data = 30
variance = 1.0
compute_time = 0.5
"#;

fn fedbatch(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("FEDBATCH_OUT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_writes_reproducible_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", CONFIG);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let o = fedbatch(&["run", "--config", &cfg, "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("round,sim_time_s,cum_cost,tau,"));

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let rows: Vec<Vec<f64>> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(
        summary["rounds_executed"].as_u64().unwrap(),
        rows.len() as u64
    );
    let last = rows.last().unwrap();
    assert!((summary["total_cost"].as_f64().unwrap() - last[2]).abs() < 1e-9);
    assert!((summary["total_time"].as_f64().unwrap() - last[1]).abs() < 1e-9);

    // The manifest alone reproduces the metrics byte for byte.
    let manifest = a.join("manifest.json");
    let o = fedbatch(&[
        "run",
        "--config",
        manifest.to_str().unwrap(),
        "--out",
        b.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());

    let o = fedbatch(&[
        "run",
        "--config",
        &cfg,
        "--out",
        b.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert!(o.status.success());
    assert_ne!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
}

#[test]
fn sweep_writes_one_run_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", CONFIG);
    let out = tmp.path().join("sweep");
    let o = fedbatch(&[
        "sweep",
        "--config",
        &cfg,
        "--axis",
        "controller=dynamite,fedavg,dynamic_tau,no_straggler",
        "--seeds",
        "1,2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 8);
    assert!(lines[0].starts_with("run,controller,seed,"));
    assert!(out
        .join("controller-fedavg_seed-2")
        .join("metrics.csv")
        .exists());
}

#[test]
fn solve_reports_all_solvers() {
    let tmp = tempfile::tempdir().unwrap();
    let inst = write(tmp.path(), "i.toml", INSTANCE);
    let o = fedbatch(&["solve", "--instance", &inst]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().collect())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    assert_eq!(names, ["uniform", "coopt-fl", "brute-force"]);
    // Symmetric clients: every solver splits evenly, and the exact solvers agree.
    for r in &rows {
        let s: Vec<&str> = r[3].split(',').collect();
        assert_eq!(s[0], s[1]);
    }
    assert_eq!(rows[1][2], rows[2][2]);

    let o = fedbatch(&["solve", "--instance", &inst, "--gpu-mode"]);
    assert!(o.status.success());
    assert!(String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .starts_with("gpu"));
}

#[test]
fn errors_are_one_line_with_a_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(
        tmp.path(),
        "bad.toml",
        "rounds = 5\n[clients]\ncount = 2\nspeeds = 1.0\n",
    );
    let cases: Vec<(Vec<String>, &str)> = vec![
        (
            vec![
                "run".into(),
                "--config".into(),
                bad.clone(),
                "--out".into(),
                "x".into(),
            ],
            "error: config:",
        ),
        (
            vec!["run".into(), "--out".into(), "x".into()],
            "error: usage:",
        ),
        (
            vec![
                "sweep".into(),
                "--config".into(),
                bad.clone(),
                "--axis".into(),
                "rounds=".into(),
                "--out".into(),
                "x".into(),
            ],
            "error: invalid-argument:",
        ),
        (
            vec![
                "solve".into(),
                "--instance".into(),
                tmp.path().join("none.toml").to_str().unwrap().into(),
            ],
            "error: config:",
        ),
    ];
    for (args, prefix) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = fedbatch(&args);
        assert!(!o.status.success());
        let err = stderr(&o);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with(prefix), "{err}");
    }
    let infeasible = write(
        tmp.path(),
        "inf.toml",
        &INSTANCE.replace("cost = 5.0", "cost = 1.0"),
    );
    let o = fedbatch(&["solve", "--instance", &infeasible]);
    assert!(
        stderr(&o).starts_with("error: infeasible:"),
        "{}",
        stderr(&o)
    );

    let missing_cost = write(tmp.path(), "m.toml", &CONFIG.replace("cost = 10.0\n", ""));
    let o = fedbatch(&["run", "--config", &missing_cost, "--out", "x"]);
    assert!(stderr(&o).contains("budget.cost"), "{}", stderr(&o));
}
