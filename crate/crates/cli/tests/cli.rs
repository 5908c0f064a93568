use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn forge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_har-forge"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "info")
        .output()
        .expect("spawn har-forge")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = forge(args, dir);
    assert!(
        out.status.success(),
        "har-forge {args:?}: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &str = "seed = 3\n[synthetic]\nsubjects = 1\nsamples_per_stream = 1400\n";

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = forge(&["--help"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["ingest", "featurize", "mancova", "train", "evaluate", "forecast", "report", "demo"] {
        assert!(text.contains(cmd), "{cmd} missing from --help");
    }
    let train = String::from_utf8_lossy(&forge(&["train", "--help"], dir.path()).stdout).into_owned();
    for flag in ["--arch", "--device", "--sensor", "--data", "--seed", "--out"] {
        assert!(train.contains(flag), "{flag} missing from train --help");
    }
}

#[test]
fn missing_raw_dir_exits_with_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = forge(&["ingest", "--in", "nowhere", "--out", "w.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere") && err.contains("--synthetic"), "{err}");
}

#[test]
fn bad_config_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[split]\ntrain = 0.9\nval = 0.2\ntest = 0.1\n").unwrap();
    let out = forge(&["--config", "bad.toml", "ingest", "--synthetic", "--out", "w.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = forge(&["demo", "--epochs", "31", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_feature_drop_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(&["--config", "small.toml", "ingest", "--synthetic", "--in", "raw", "--out", "w.csv"], d);
    let out = forge(&["featurize", "--in", "w.csv", "--out", "f.csv", "--drop-feature", "NOPE"], d);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_stages_chain_and_rerun_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    let cfg = ["--config", "small.toml"];
    let with = |rest: &[&str]| -> Vec<String> { cfg.iter().chain(rest).map(|s| s.to_string()).collect() };
    let run = |rest: &[&str]| {
        let args = with(rest);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs, d)
    };

    let steps: Vec<Vec<&str>> = vec![
        vec!["ingest", "--synthetic", "--in", "raw/watch", "--out", "watch.csv"],
        vec!["ingest", "--synthetic", "--device", "phone", "--in", "raw/phone", "--out", "phone.csv"],
        vec!["featurize", "--in", "watch.csv", "--out", "features.csv", "--drop-feature", "ZPEAK"],
        vec!["train", "--arch", "cnn", "--data", "features.csv", "--epochs", "2", "--out", "cnn.json"],
        vec!["evaluate", "--model", "cnn.json", "--data", "features.csv", "--out", "cnn_eval.json"],
        vec![
            "forecast", "--activity", "H", "--data", "watch.csv", "--epochs", "1", "--stride", "25", "--horizon", "200",
            "--out", "H.csv",
        ],
    ];
    for s in &steps {
        run(s);
    }
    let mancova = forge(
        &["mancova", "--phone", "phone.csv", "--watch", "watch.csv", "--sensor", "accel", "--out", "m.json"],
        d,
    );
    assert!(mancova.status.success());
    assert!(String::from_utf8_lossy(&mancova.stdout).contains("Wilks' lambda"));
    run(&["report", "--classifier", "cnn_eval.json", "--forecast", "H.metrics.json", "--out", "report"]);
    for t in ["macro_f1", "precision_nonhand", "precision_hand", "forecast"] {
        assert!(d.join(format!("report/tables/{t}.csv")).is_file(), "{t}");
    }
    let features = fs::read_to_string(d.join("features.csv")).unwrap();
    assert!(features.contains("provenance=synthetic"));
    assert!(!features.lines().nth(1).unwrap().contains("ZPEAK"));

    let snapshot = |names: &[&str]| -> Vec<Vec<u8>> { names.iter().map(|n| fs::read(d.join(n)).unwrap()).collect() };
    let artifacts = ["watch.csv", "features.csv", "cnn.json", "cnn.bin", "cnn.history.json", "cnn_eval.json", "H.csv"];
    let before = snapshot(&artifacts);
    for s in &steps[2..] {
        let log = run(s);
        assert!(log.contains("up to date"), "{s:?} reran:\n{log}");
    }
    assert_eq!(snapshot(&artifacts), before);

    // a changed parameter invalidates only that stage
    let log = run(&["train", "--arch", "cnn", "--data", "features.csv", "--epochs", "3", "--out", "cnn.json"]);
    assert!(!log.contains("up to date"));
}

#[test]
fn forecast_rejects_non_eating_activity() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();
    ok(&["--config", "small.toml", "ingest", "--synthetic", "--in", "raw", "--out", "w.csv"], d);
    let out = forge(&["forecast", "--activity", "A", "--data", "w.csv", "--out", "A.csv"], d);
    assert_eq!(out.status.code(), Some(2));
}
