use std::path::Path;
use std::process::{Command, Output};

const HAWKES: &str = r#"{
  "d": 1,
  "horizon": {"t_hat0": 0.0, "t0": 0.0, "t1": 1.0},
  "n": 200,
  "baseline": {"variant": "constant", "rates": [{"param": 0}]},
  "kernel": {"variant": "exponential", "a": [[{"param": 1}]], "b": {"param": 2}},
  "covariate": {"variant": "self_exciting"},
  "param_space": {"lower": [0.05, 0.0, 0.05], "upper": [5.0, 5.0, 20.0]}
}"#;

fn qlapp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlapp")).current_dir(dir).args(args).output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_then_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("model.json"), HAWKES).unwrap();
    ok(&qlapp(d, &["simulate", "--model", "model.json", "--theta", "[1, 1, 2]", "--seed", "4", "--out", "sim"]));
    let events = std::fs::read_to_string(d.join("sim/events.csv")).unwrap();
    assert!(events.starts_with("component,time\n"));
    assert!(events.lines().count() > 100);

    // same seed, same file
    ok(&qlapp(d, &["simulate", "--model", "model.json", "--theta", "[1, 1, 2]", "--seed", "4", "--out", "again"]));
    assert_eq!(events, std::fs::read_to_string(d.join("again/events.csv")).unwrap());

    ok(&qlapp(d, &["estimate", "--model", "model.json", "--path", "sim/events.csv", "--out", "fit.json", "--trace"]));
    let fit = json(&d.join("fit.json"));
    for key in ["theta_hat", "loglik", "grad_norm", "observed_info", "stderr", "n_restarts_used", "converged"] {
        assert!(fit.get(key).is_some(), "{key}");
    }
    assert_eq!(fit["theta_hat"].as_array().unwrap().len(), 3);
    assert!(d.join("fit.trace.csv").exists());

    ok(&qlapp(d, &["estimate", "--model", "model.json", "--path", "sim/events.csv", "--method", "qbe", "--prior", "uniform", "--out", "qbe.json"]));
    let q = json(&d.join("qbe.json"));
    assert!(q.get("theta_tilde").is_some() && q.get("log_normalizer").is_some());
}

#[test]
fn asymptotics_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("model.json"), HAWKES).unwrap();
    ok(&qlapp(d, &["asymptotics", "--model", "model.json", "--theta-star", "[1, 1, 2]", "--out", "a.json"]));
    let a = json(&d.join("a.json"));
    let g = &a["gamma"]["gamma"];
    assert!((g[0][0].as_f64().unwrap() - 0.7449).abs() < 1e-3, "{g}");
    assert!(a["identifiability"]["conditions"].as_array().unwrap().len() >= 7);
    assert!(a["chi0"]["chi0"].as_f64().unwrap() > 0.0);
    let csv = std::fs::read_to_string(d.join(a["lambda_inf_csv"].as_str().unwrap())).unwrap();
    assert!(csv.starts_with("time,lambda_0\n"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // θ outside the box is a validation failure
    std::fs::write(d.join("model.json"), HAWKES).unwrap();
    let o = qlapp(d, &["simulate", "--model", "model.json", "--theta", "[1, 1, 50]"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = qlapp(d, &["simulate", "--model", "missing.json", "--theta", "[1]"]);
    assert_eq!(o.status.code(), Some(1));
    let o = qlapp(d, &["mc-study"]);
    assert_eq!(o.status.code(), Some(2));
    // zero baseline: λ vanishes at the first event for every θ, so estimation fails numerically
    let zero = HAWKES.replace("[{\"param\": 0}]", "[0.0]").replace("\"lower\": [0.05, 0.0, 0.05], \"upper\": [5.0, 5.0, 20.0]", "\"lower\": [0.0, 0.0, 0.05], \"upper\": [1.0, 5.0, 20.0]");
    std::fs::write(d.join("zero.json"), zero).unwrap();
    std::fs::write(d.join("one.csv"), "component,time\n0,0.5\n").unwrap();
    let o = qlapp(d, &["estimate", "--model", "zero.json", "--path", "one.csv"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn mc_study_and_pldi_probe() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = r#"{
      "model": {"d": 1, "horizon": {"t_hat0": 0.0, "t0": 0.0, "t1": 1.0}, "n": 100,
                "baseline": {"variant": "constant", "rates": [{"param": 0}]},
                "kernel": {"variant": "zero"}, "covariate": {"variant": "self_exciting"},
                "param_space": {"lower": [0.01], "upper": [10.0]}},
      "theta_star": [2.0], "n_values": [100, 400], "replicates": 20, "seed": 1
    }"#;
    std::fs::write(d.join("mc.json"), cfg).unwrap();
    ok(&qlapp(d, &["mc-study", "--config", "mc.json", "--out", "study", "--threads", "2"]));
    let m = json(&d.join("study/manifest.json"));
    assert_eq!(m["summary"]["per_n"].as_array().unwrap().len(), 2);
    assert!(d.join("study/statistics_long.csv").exists());
    let first = std::fs::read(d.join("study/manifest.json")).unwrap();
    ok(&qlapp(d, &["mc-study", "--config", "mc.json", "--out", "study2", "--threads", "1"]));
    assert_eq!(first, std::fs::read(d.join("study2/manifest.json")).unwrap());
    ok(&qlapp(d, &["mc-study", "--config", "mc.json", "--out", "study3", "--seed", "2"]));
    let other = json(&d.join("study3/manifest.json"));
    assert_ne!(other["config_hash"], m["config_hash"]);

    let pcfg = cfg.replace("\"n_values\": [100, 400], \"replicates\": 20", "\"n\": 400, \"r_grid\": [0, 1, 2, 4], \"replicates\": 50");
    std::fs::write(d.join("pldi.json"), pcfg).unwrap();
    ok(&qlapp(d, &["pldi-probe", "--config", "pldi.json", "--out", "probe"]));
    let t = json(&d.join("probe/pldi.json"));
    assert_eq!(t["rows"][0]["probability"], 1.0);
    assert!(std::fs::read_to_string(d.join("probe/pldi.csv")).unwrap().starts_with("r,hits,trials,probability"));
}

#[test]
fn lob_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("map.json"),
        r#"[{"component": 0, "side": "ask", "level": 1, "kind": "limit"},
            {"component": 1, "side": "ask", "level": 1, "kind": "cancel"},
            {"component": 2, "side": "bid", "level": 1, "kind": "market"}]"#,
    )
    .unwrap();
    std::fs::write(d.join("events.csv"), "component,time\n0,0.1\n1,0.2\n1,0.3\n1,0.4\n2,0.5\n").unwrap();
    std::fs::write(d.join("book.json"), r#"{"ask_queues": [10], "bid_queues": [10], "q": 10}"#).unwrap();
    ok(&qlapp(d, &["lob-replay", "--config", "book.json", "--event-map", "map.json", "--events", "events.csv", "--out", "lob"]));
    let r = json(&d.join("lob/replay.json"));
    assert_eq!(r["violations"], 1);
    assert_eq!(r["final_state"]["ask_queues"][0], 0);
    assert_eq!(r["final_state"]["bid_queues"][0], 0);
    let traj = std::fs::read_to_string(d.join("lob/trajectory.csv")).unwrap();
    assert_eq!(traj.lines().count(), 1 + 6 * 2);
    assert!(traj.lines().nth(3).unwrap().ends_with("ask_1,20"));
}
