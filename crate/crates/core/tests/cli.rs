use std::path::Path;
use std::process::{Command, Output};

fn tractory(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tractory"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tractory(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr carries a JSON error record")
}

#[test]
fn crossing_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = p("run.json");
    std::fs::write(
        &cfg,
        r#"{ "train": { "epochs": 2, "hidden": [16], "batch_size": 128, "streamlines_per_bundle": 8 },
             "tracker": { "seeds_per_voxel": 1 } }"#,
    )
    .unwrap();
    let phantom = p("phantom");
    let announce = ok(&[
        "phantom",
        "--preset",
        "crossing-90",
        "--dims",
        "24",
        "--seed",
        "3",
        "--config",
        s(&cfg),
        "--out",
        s(&phantom),
    ]);
    let first = String::from_utf8(announce.stdout).unwrap();
    let record: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(record["command"], "phantom");

    let fixels = p("fixels.nii");
    ok(&[
        "fixel",
        "--tracks",
        s(&phantom.join("gt.tck")),
        "--grid",
        s(&phantom.join("fa.nii")),
        "--config",
        s(&cfg),
        "--out",
        s(&fixels),
    ]);
    let ckpt = p("ckpt");
    ok(&[
        "train",
        "--data",
        s(&phantom),
        "--fixels",
        s(&fixels),
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
    ]);
    assert!(ckpt.join("manifest.json").exists());

    let tracks = p("learned.tck");
    ok(&[
        "track",
        "--checkpoint",
        s(&ckpt),
        "--phantom",
        s(&phantom),
        "--fixels",
        s(&fixels),
        "--seed",
        "4",
        "--config",
        s(&cfg),
        "--out",
        s(&tracks),
    ]);
    let report = p("report.json");
    ok(&[
        "eval",
        "--tracks",
        s(&tracks),
        "--phantom",
        s(&phantom),
        "--config",
        s(&cfg),
        "--out",
        s(&report),
    ]);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let bundles = r["report"]["bundles"]
        .as_array()
        .expect("per-bundle scores");
    assert_eq!(bundles.len(), 2);
    for b in bundles {
        let dice = b["dice"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&dice));
    }
}

#[test]
fn same_seed_gives_identical_tracks() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let phantom = p("phantom");
    ok(&[
        "phantom",
        "--preset",
        "straight",
        "--dims",
        "20",
        "--seed",
        "1",
        "--out",
        s(&phantom),
    ]);
    let run = |name: &str, threads: &str| {
        let out = p(name);
        ok(&[
            "--threads",
            threads,
            "track",
            "--algo",
            "fact",
            "--phantom",
            s(&phantom),
            "--seed",
            "7",
            "--out",
            s(&out),
        ]);
        std::fs::read(out).unwrap()
    };
    let a = run("a.tck", "1");
    assert!(!a.is_empty());
    assert_eq!(a, run("b.tck", "1"));
    assert_eq!(a, run("c.tck", "3"));
}

#[test]
fn non_positive_alpha_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "tracker": { "alphas": [1600, 0] } }"#).unwrap();
    let out = tractory(&[
        "track",
        "--algo",
        "fact",
        "--phantom",
        s(dir.path()),
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("x.tck")),
    ]);
    assert_eq!(out.status.code(), Some(16));
    assert_eq!(error_json(&out)["error"], "schema");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{ "tracker": { "step": 0.5 } }"#).unwrap();
    let out = tractory(&[
        "phantom",
        "--preset",
        "straight",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(16));
}

#[test]
fn missing_input_exits_with_its_own_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = tractory(&[
        "eval",
        "--tracks",
        s(&dir.path().join("absent.tck")),
        "--phantom",
        s(dir.path()),
        "--out",
        s(&dir.path().join("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(11));
    let e = error_json(&out);
    assert_eq!(e["exit_code"], 11);
    assert!(e["message"].as_str().unwrap().contains("absent.tck"));
}

#[test]
fn zero_threads_is_rejected() {
    let out = tractory(&[
        "--threads",
        "0",
        "phantom",
        "--preset",
        "straight",
        "--out",
        "/nonexistent/never",
    ]);
    assert_eq!(out.status.code(), Some(18));
}
