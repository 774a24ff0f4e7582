use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sonar_loop::io::{save_dataset, Dataset, Metadata};
use sonar_loop::synth::{Scenario, ScenarioName};

fn sonar_loop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonar-loop")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sonar_loop(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn small_dataset(dir: &Path) {
    let mut s = Scenario::new(ScenarioName::Pond);
    s.plan.legs = 2;
    s.plan.leg_length = 60.0;
    s.plan.revisit_legs = 1;
    let survey = s.generate(0).unwrap();
    let dataset = Dataset {
        imu: survey.imu,
        dvl: survey.dvl,
        pings: survey.pings,
        truth: Some(survey.truth),
        metadata: Metadata::new("small", Some(s.d)),
    };
    save_dataset(dir, &dataset).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn detect_outputs_follow_gamma() {
    let root = tempfile::tempdir().unwrap();
    let (data, out) = (root.path().join("data"), root.path().join("out"));
    small_dataset(&data);

    ok(&["detect", "--dataset", p(&data), "--out", p(&out), "--gamma", "0.3"]);
    let loops = fs::read_to_string(out.join("loops.csv")).unwrap();
    let scores = fs::read_to_string(out.join("scores.csv")).unwrap();
    assert!(loops.starts_with("i,j,gamma,is_loop\n"));
    assert!(scores.starts_with("i,j,gamma\n"));
    assert_eq!(loops.lines().count(), scores.lines().count());

    ok(&["detect", "--dataset", p(&data), "--out", p(&out), "--gamma", "0.5", "--flagged-only"]);
    let flagged = fs::read_to_string(out.join("loops.csv")).unwrap();
    assert!(flagged.lines().skip(1).all(|l| l.ends_with(",true")));

    ok(&["detect", "--dataset", p(&data), "--out", p(&out)]);
    assert!(out.join("scores.csv").is_file());
    assert!(!out.join("loops.csv").exists());
    assert_eq!(json(&out.join("config.json"))["gamma"], serde_json::Value::Null);
}

#[test]
fn crop_modes_give_separate_scores() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    small_dataset(&data);
    let (square, cylinder) = (root.path().join("square"), root.path().join("cylinder"));
    ok(&["detect", "--dataset", p(&data), "--out", p(&square), "--crop", "square"]);
    ok(&["detect", "--dataset", p(&data), "--out", p(&cylinder), "--crop", "cylinder"]);
    let a = fs::read_to_string(square.join("scores.csv")).unwrap();
    let b = fs::read_to_string(cylinder.join("scores.csv")).unwrap();
    assert_eq!(a.lines().count(), b.lines().count());
    assert_ne!(a, b);
    assert_eq!(json(&cylinder.join("config.json"))["crop"], "cylinder");
}

#[test]
fn config_precedence() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    small_dataset(&data);
    let config = root.path().join("config.json");
    fs::write(&config, r#"{"n": 3, "M": 12, "cap": null, "dead_reckoning": {"beta": 0.05}}"#).unwrap();

    let out = root.path().join("a");
    ok(&["detect", "--dataset", p(&data), "--out", p(&out), "--config", p(&config), "--n", "4"]);
    let echoed = json(&out.join("config.json"));
    assert_eq!(echoed["n"], 4);
    assert_eq!(echoed["M"], 12);
    assert_eq!(echoed["cap"], serde_json::Value::Null);
    assert_eq!(echoed["exclusion"], 13);
    assert_eq!(echoed["dead_reckoning"]["beta"], 0.05);
    assert_eq!(echoed["d"], 10.0);

    let out = root.path().join("b");
    ok(&["detect", "--dataset", p(&data), "--out", p(&out), "--d", "7.5", "--cap", "0", "--exclusion", "40"]);
    let echoed = json(&out.join("config.json"));
    assert_eq!(echoed["n"], 10);
    assert_eq!(echoed["d"], 7.5);
    assert_eq!(echoed["cap"], serde_json::Value::Null);
    assert_eq!(echoed["exclusion"], 40);

    fs::write(&config, r#"{"n": 3, "neighbours": 4}"#).unwrap();
    let bad = sonar_loop(&["detect", "--dataset", p(&data), "--out", p(&out), "--config", p(&config)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("neighbours"));
}

#[test]
fn errors_name_their_stage() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    small_dataset(&data);
    let imu = fs::read_to_string(data.join("imu.csv")).unwrap();
    let mut lines: Vec<&str> = imu.lines().collect();
    lines[2] = "0.04,0.1,0.2,0.3,0.4";
    fs::write(data.join("imu.csv"), lines.join("\n")).unwrap();
    let out = sonar_loop(&["detect", "--dataset", p(&data), "--out", p(&root.path().join("out"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ingestion") && err.contains("imu.csv:3"), "{err}");

    let out = sonar_loop(&["simulate", "--scenario", "lagoon", "--out", p(&root.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown scenario 'lagoon'"));

    let out = sonar_loop(&["detect", "--dataset", p(&root.path().join("missing")), "--out", p(&root.path().join("y"))]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_perfect_and_empty_scores() {
    let root = tempfile::tempdir().unwrap();
    let (data, out) = (root.path().join("data"), root.path().join("out"));
    small_dataset(&data);
    ok(&["detect", "--dataset", p(&data), "--out", p(&out)]);

    // Rescore with the truth: 1 for positives, 0 otherwise.
    let dataset = sonar_loop::io::load_dataset(&data).unwrap();
    let truth = sonar_loop::pipeline::ping_truth(dataset.truth.as_ref().unwrap(), &dataset.pings).unwrap();
    let scores = sonar_loop::detector::read_scores_csv(&out.join("scores.csv")).unwrap();
    let mut perfect = String::from("i,j,gamma\n");
    for s in &scores {
        let close = (truth[s.i].position() - truth[s.j].position()).norm() < 5.0;
        perfect.push_str(&format!("{},{},{}\n", s.i, s.j, if close { 1 } else { 0 }));
    }
    let perfect_path = root.path().join("perfect.csv");
    fs::write(&perfect_path, perfect).unwrap();
    let eval = root.path().join("eval");
    ok(&["evaluate", "--dataset", p(&data), "--scores", p(&perfect_path), "--out", p(&eval)]);
    let summary = json(&eval.join("summary.json"));
    assert_eq!(summary["ap"], 1.0);
    assert!(summary["positives"].as_u64().unwrap() > 0);
    assert!(fs::read_to_string(eval.join("pr.csv")).unwrap().starts_with("gamma,precision,recall,tp,fp,fn\n"));
    assert!(fs::read_to_string(eval.join("pr.svg")).unwrap().contains("<polyline"));

    let far = root.path().join("far.csv");
    fs::write(&far, "i,j,gamma\n").unwrap();
    let res = sonar_loop(&["evaluate", "--dataset", p(&data), "--scores", p(&far), "--out", p(&eval)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("no positive pairs"));
}

#[test]
fn simulate_scenarios() {
    let root = tempfile::tempdir().unwrap();
    let flats = root.path().join("flats");
    let out = ok(&["simulate", "--scenario", "flats", "--seed", "2", "--out", p(&flats)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pings") && stdout.contains("legs") && stdout.contains("crossings"));
    let meta = json(&flats.join("metadata.json"));
    assert_eq!(meta["extra"]["bumps"], 0);
    assert_eq!(meta["d"], 10.0);

    let abyss = root.path().join("abyss");
    ok(&["simulate", "--scenario", "abyss", "--out", p(&abyss)]);
    assert_eq!(json(&abyss.join("metadata.json"))["d"], 100.0);

    // The written directory reloads and rewrites byte for byte.
    let copy = root.path().join("copy");
    save_dataset(&copy, &sonar_loop::io::load_dataset(&flats).unwrap()).unwrap();
    for name in ["imu.csv", "dvl.csv", "mbes.csv", "truth_poses.csv", "metadata.json"] {
        assert_eq!(fs::read(flats.join(name)).unwrap(), fs::read(copy.join(name)).unwrap(), "{name}");
    }
}
