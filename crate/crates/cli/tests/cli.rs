use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn opis(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opis"))
        .args(args)
        .current_dir(cwd)
        .env_remove("OPIS_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "[data]\nnum_proposals = 40\n[train]\niterations = 30\ntrain_scenes = 6\neval_scenes = 4\n";

#[test]
fn missing_config_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = opis(&["train", "--config", "no/such/file.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/file.toml"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[sampler]\nlambda_ng = 0.5\nlamda_ig = 0.1\n").unwrap();
    let o = opis(&["train", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda_ig"), "{}", stderr(&o));
}

#[test]
fn invalid_value_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[reweight]\nbeta = 1.5\n").unwrap();
    let o = opis(&["train", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("beta"), "{}", stderr(&o));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), format!("{SMALL}base_lr = 1e200\n")).unwrap();
    let o = opis(&["train", "--config", "c.toml", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("iteration"));
}

#[test]
fn default_config_trains_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let o = opis(&["train", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(dir.path().join("run/trainlog.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,phase,T,mu,zeta_mean,loss_midn,loss_ref_1,loss_ref_2,loss_ref_3,pos_count,neg_count_before,neg_count_after"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4000);
    // first fine-tune iteration: T = 0 and mu = mu_s
    assert!(rows[3120].starts_with("3120,finetune,0,20,"), "{}", rows[3120]);
    assert!(rows[3119].starts_with("3119,normal,,,"));
    assert!(rows[3999].starts_with("3999,finetune,1,4,"), "{}", rows[3999]);
    let timing = fs::read_to_string(dir.path().join("run/timing.csv")).unwrap();
    assert_eq!(timing.lines().count(), 4001);
    let echo = fs::read_to_string(dir.path().join("run/config.resolved.toml")).unwrap();
    assert!(echo.contains("[reweight]") && echo.contains("gamma = 0.9"));
}

#[test]
fn overrides_and_resolved_echo() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = opis(
        &["train", "--config", "c.toml", "--out", "run", "--seed", "9", "--method", "baseline", "--iterations-override", "12"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = fs::read_to_string(dir.path().join("run/config.resolved.toml")).unwrap();
    let cfg = opis_core::ExperimentConfig::from_toml_str(&echo).unwrap();
    assert_eq!((cfg.train.seed, cfg.train.iterations), (9, 12));
    assert_eq!(cfg.train.method, opis_core::harness::Method::Baseline);
    let log = fs::read_to_string(dir.path().join("run/trainlog.csv")).unwrap();
    assert_eq!(log.lines().count(), 13);
    // baseline never balances instances, so mu stays empty and counts are untouched
    for row in log.lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[3], "");
        assert_eq!(f[f.len() - 1], f[f.len() - 2]);
    }
}

#[test]
fn train_then_eval_writes_metrics_and_detections() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    assert_eq!(opis(&["train", "--config", "c.toml", "--out", "run"], dir.path()).status.code(), Some(0));
    let o = opis(&["eval", "--model", "run/model.json", "--out", "ev"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ev/metrics.json")).unwrap()).unwrap();
    assert!(metrics["mAP"].as_f64().unwrap() >= 0.0);
    assert!(metrics["CorLoc"].as_f64().unwrap() <= 1.0);
    assert_eq!(metrics["num_scenes"], 4);
    let dets = fs::read_to_string(dir.path().join("ev/detections.jsonl")).unwrap();
    assert_eq!(dets.lines().count() as u64, metrics["num_detections"].as_u64().unwrap());
    let first: serde_json::Value = serde_json::from_str(dets.lines().next().unwrap()).unwrap();
    for key in ["scene_id", "class_id", "score", "x1", "y1", "x2", "y2"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    let again = opis(&["eval", "--model", "run/model.json", "--out", "ev2"], dir.path());
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("ev/detections.jsonl")).unwrap(), fs::read(dir.path().join("ev2/detections.jsonl")).unwrap());
    let other = opis(&["eval", "--model", "run/model.json", "--out", "ev3", "--dataset-seed", "77"], dir.path());
    assert_eq!(other.status.code(), Some(0));
    assert_ne!(fs::read(dir.path().join("ev/detections.jsonl")).unwrap(), fs::read(dir.path().join("ev3/detections.jsonl")).unwrap());
}

#[test]
fn eval_of_missing_model_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = opis(&["eval", "--model", "absent.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.json"));
}

#[test]
fn compare_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let args = ["compare", "--config", "c.toml", "--methods", "baseline,opis", "--seeds", "0,1"];
    let one = Command::new(env!("CARGO_BIN_EXE_opis"))
        .args(args)
        .args(["--out", "one.csv"])
        .current_dir(dir.path())
        .env("OPIS_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(one.status.code(), Some(0), "{}", stderr(&one));
    let two = opis(&[&args[..], &["--out", "two.csv", "--threads", "3"]].concat(), dir.path());
    assert_eq!(two.status.code(), Some(0), "{}", stderr(&two));
    let a = fs::read_to_string(dir.path().join("one.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("two.csv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "method,seed,mAP,CorLoc");
    assert_eq!(lines.len(), 1 + 4 + 2);
    assert!(lines[1].starts_with("baseline,0,") && lines[4].starts_with("opis,1,"));
    assert!(lines[5].starts_with("baseline,median,") && lines[6].starts_with("opis,median,"));
}

#[test]
fn unknown_method_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = opis(&["train", "--method", "oicr"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("oicr"));
}

#[test]
fn gradcheck_passes_on_several_seeds() {
    let dir = tempfile::tempdir().unwrap();
    for seed in ["0", "1", "17"] {
        let o = opis(&["gradcheck", "--seed", seed], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    }
}

#[test]
fn sample_demo_traces_each_class() {
    let dir = tempfile::tempdir().unwrap();
    let o = opis(&["sample-demo", "--iteration", "3500", "--seed", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("mu = "), "{out}");
    assert!(out.contains("branch 3"));
    assert!(out.contains("n_P"));
    let normal = opis(&["sample-demo", "--iteration", "10"], dir.path());
    assert_eq!(normal.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&normal.stdout).contains("normal phase"));
    let past = opis(&["sample-demo", "--iteration", "4000"], dir.path());
    assert_eq!(past.status.code(), Some(2));
}
