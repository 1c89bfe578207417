use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qrsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qrsim(args);
    assert!(
        out.status.success(),
        "qrsim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CHAIN: &str = r#""n_segments": 4, "L0_km": 20, "tau_c_ms": 1"#;

#[test]
fn sweep_writes_one_row_per_cutoff() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        &format!(
            r#"{{{CHAIN}, "seed": 2, "sweep": {{"c_values": [1, 2, 3, 4, 5], "T": 10000, "M": 10}}}}"#
        ),
    );
    let out = dir.path().join("s.csv");
    ok(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        s(&out),
        "--workers",
        "2",
    ]);
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "cutoff,rate_per_s,ci3sigma,raw_rate_per_s,e_x,M,T,seed"
    );
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("1,"));

    // Same seed, different worker count: identical bytes.
    let again = dir.path().join("s2.csv");
    ok(&[
        "sweep",
        "--config",
        &cfg,
        "--out",
        s(&again),
        "--workers",
        "1",
    ]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&again).unwrap());

    // The echoed config reproduces the run.
    let echo = dir.path().join("s.csv.config.json");
    let third = dir.path().join("s3.csv");
    ok(&["sweep", "--config", s(&echo), "--out", s(&third)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(&third).unwrap());
}

#[test]
fn duplicate_cutoffs_keep_input_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        &format!(r#"{{{CHAIN}, "sweep": {{"c_values": [3, "none", 3], "T": 2000, "M": 4}}}}"#),
    );
    let out = dir.path().join("s.csv");
    ok(&["sweep", "--config", &cfg, "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("3,") && rows[1].starts_with("none,") && rows[2].starts_with("3,"));
    assert_eq!(rows[0], rows[2]);
}

#[test]
fn train_eval_census_round() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(
        dir.path(),
        "train.json",
        &format!(
            r#"{{{CHAIN}, "seed": 4, "train": {{"epochs": 1, "L": 100, "N": 2, "n_pi": 3, "n_v": 3}}}}"#
        ),
    );
    let stdout = ok(&["train", "--config", &cfg, "--out", s(&run)]);
    let latest = run.join("policy_latest.json");
    assert!(stdout.trim_end().ends_with(s(&latest)));
    let log = fs::read_to_string(run.join("epoch_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().nth(1).unwrap().starts_with("1,"));
    assert!(run.join("effective_config.json").exists());

    // Resume with a larger budget continues the numbering.
    let cfg2 = write_config(
        dir.path(),
        "train2.json",
        &format!(
            r#"{{{CHAIN}, "seed": 4, "train": {{"epochs": 2, "L": 100, "N": 2, "n_pi": 3, "n_v": 3}}}}"#
        ),
    );
    ok(&["train", "--config", &cfg2, "--out", s(&run), "--resume"]);
    let log = fs::read_to_string(run.join("epoch_log.csv")).unwrap();
    let epochs: Vec<&str> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(epochs, ["1", "2"]);

    let sweep_cfg = write_config(
        dir.path(),
        "sweep.json",
        &format!(r#"{{{CHAIN}, "sweep": {{"c_values": [2, 5, "none"], "T": 2000, "M": 4}}}}"#),
    );
    let sweep = dir.path().join("sweep.csv");
    ok(&["sweep", "--config", &sweep_cfg, "--out", s(&sweep)]);

    let eval_cfg = write_config(
        dir.path(),
        "eval.json",
        &format!(
            r#"{{{CHAIN}, "eval": {{"checkpoint": {:?}, "M": 4, "T": 2000, "sweep": {:?}}}}}"#,
            s(&latest),
            s(&sweep)
        ),
    );
    let eval_out = dir.path().join("eval.json");
    ok(&["eval", "--config", &eval_cfg, "--out", s(&eval_out)]);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&eval_out).unwrap()).unwrap();
    for k in ["rate_per_s", "ci3sigma", "raw_rate_per_s", "e_x"] {
        assert!(v[k].as_f64().unwrap().is_finite(), "{k}");
    }
    assert_eq!(v["M"], 4);
    assert_eq!(v["T"], 2000);
    assert!(v["ratios"]["vs_no_cutoff"].as_f64().unwrap().is_finite());
    assert!(v["ratios"]["vs_benchmark"].as_f64().unwrap().is_finite());

    let census_cfg = write_config(
        dir.path(),
        "census.json",
        &format!(
            r#"{{{CHAIN}, "census": {{"checkpoint": {:?}, "T": 500}}}}"#,
            s(&latest)
        ),
    );
    let census = dir.path().join("census.csv");
    ok(&["census", "--config", &census_cfg, "--out", s(&census)]);
    let text = fs::read_to_string(&census).unwrap();
    assert_eq!(text.lines().next().unwrap(), "state,action,count");
    let total: u64 = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 500);
}

#[test]
fn zero_checkpoint_evaluates_to_a_finite_rate() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("zero.json");
    let layer = |o: usize, i: usize| vec![vec![0.0; i]; o];
    let body = serde_json::json!({
        "arch": {"input": 10, "hidden": [4], "output": 9, "hidden_act": "tanh", "out_act": "sigmoid"},
        "weights": [layer(4, 10), layer(9, 4)],
        "biases": [vec![0.0; 4], vec![0.0; 9]],
        "epoch": 0,
        "config_hash": "none"
    });
    fs::write(&ck, body.to_string()).unwrap();
    let cfg = write_config(
        dir.path(),
        "eval.json",
        &format!(
            r#"{{{CHAIN}, "eval": {{"checkpoint": {:?}, "M": 3, "T": 3000}}}}"#,
            s(&ck)
        ),
    );
    let stdout = ok(&[
        "eval",
        "--config",
        &cfg,
        "--out",
        s(&dir.path().join("e.json")),
    ]);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(v["rate_per_s"].as_f64().unwrap().is_finite());
    assert!(v["ci3sigma"].as_f64().unwrap().is_finite());
    assert!(v.get("ratios").is_none());
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let eval = write_config(
        dir.path(),
        "eval.json",
        &format!(r#"{{{CHAIN}, "eval": {{"checkpoint": "/nonexistent/p.json"}}}}"#),
    );
    let sweep = write_config(
        dir.path(),
        "sweep.json",
        &format!(r#"{{{CHAIN}, "sweep": {{"c_values": [1], "T": 100, "M": 2}}}}"#),
    );
    let cases: Vec<Vec<&str>> = vec![
        vec!["eval", "--config", &eval],
        vec!["train", "--config", &sweep],
        vec!["sweep", "--config", &sweep, "--resume"],
        vec!["sweep", "--config", "/nonexistent/config.json"],
        vec!["sweep", "--config", &sweep, "--workers", "0"],
    ];
    for args in cases {
        let out = qrsim(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sweep.json",
        &format!(r#"{{{CHAIN}, "seed": 1, "sweep": {{"c_values": [2], "T": 3000, "M": 4}}}}"#),
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["sweep", "--config", &cfg, "--out", s(&a), "--seed", "9"]);
    ok(&["sweep", "--config", &cfg, "--out", s(&b)]);
    let a = fs::read_to_string(a).unwrap();
    let b = fs::read_to_string(b).unwrap();
    assert!(a.lines().nth(1).unwrap().ends_with(",9"));
    assert!(b.lines().nth(1).unwrap().ends_with(",1"));
}
