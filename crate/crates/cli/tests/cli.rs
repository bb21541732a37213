mod common;

use std::fs;

use common::{fixture, metasbir, pipeline, snapshot};

fn stderr(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(metasbir(&["--help"]).status.code(), Some(0));
    assert_eq!(metasbir(&["--version"]).status.code(), Some(0));
    assert_eq!(metasbir(&["eval", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(metasbir(&[]).status.code(), Some(2));
    assert_eq!(metasbir(&["train-everything"]).status.code(), Some(2));
    assert_eq!(metasbir(&["gen-data", "--bogus"]).status.code(), Some(2));
    let conf = fixture();
    let conf = conf.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(
        metasbir(&["gen-data", "--config", conf, "--out", out, "--threads", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        metasbir(&[
            "meta-train",
            "--config",
            conf,
            "--out",
            out,
            "--variant",
            "nope"
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(
        metasbir(&["eval", "--config", conf, "--out", out, "--methods", "magic"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.conf");
    let o = metasbir(&[
        "gen-data",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.conf"), "{}", stderr(&o));
}

#[test]
fn invalid_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "meta.k = many\n").unwrap();
    let o = metasbir(&[
        "gen-data",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    fs::write(&conf, "no.such.key = 1\n").unwrap();
    let o = metasbir(&[
        "gen-data",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let conf = fixture();
    let conf = conf.to_str().unwrap();
    let o = metasbir(&["pretrain", "--config", conf, "--out", out]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(
        metasbir(&["gen-data", "--config", conf, "--out", out])
            .status
            .code(),
        Some(0)
    );
    let o = metasbir(&["eval", "--config", conf, "--out", out, "--methods", "ours"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    for (step, o) in pipeline(dir.path()) {
        assert_eq!(o.status.code(), Some(0), "{step}: {}", stderr(&o));
    }
    let files = snapshot(dir.path());
    for name in [
        "items.jsonl",
        "semantic.jsonl",
        "split.json",
        "baseline.ckpt",
        "pretrain_curve.csv",
        "meta-ours.ckpt",
        "meta-fixed-margin.ckpt",
        "meta_curve-ours.csv",
        "report.csv",
        "report.json",
        "margins.csv",
        "ablation.csv",
        "ablation.json",
        "ablation_margins.csv",
        "gradcheck.json",
        "manifest-gen-data.json",
        "manifest-pretrain.json",
        "manifest-meta-train-ours.json",
        "manifest-eval.json",
        "manifest-ablate.json",
    ] {
        assert!(files.contains_key(name), "missing {name}");
    }
    let report = String::from_utf8(files["report.csv"].clone()).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 * 2);
    let grads: serde_json::Value = serde_json::from_slice(&files["gradcheck.json"]).unwrap();
    assert_eq!(grads["passed"], true);

    let conf = fixture();
    let out = dir.path().join("narrow");
    let o = metasbir(&[
        "eval",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--data",
        dir.path().to_str().unwrap(),
        "--checkpoints",
        dir.path().to_str().unwrap(),
        "--methods",
        "ours,no-adapt",
        "--k",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3, "{report}");
}

#[test]
fn resumed_meta_training_matches_an_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let conf = fixture();
    let text = fs::read_to_string(&conf).unwrap();
    let short = full.path().join("short.conf");
    fs::write(&short, text.replace("meta.epochs = 2", "meta.epochs = 1")).unwrap();
    let run = |args: &[&str], dir: &std::path::Path, conf: &std::path::Path| {
        let mut all = args.to_vec();
        all.extend([
            "--config",
            conf.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--threads",
            "1",
        ]);
        let o = metasbir(&all);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    };
    let a = full.path().join("a");
    let b = full.path().join("b");
    for dir in [&a, &b] {
        run(&["gen-data"], dir, &conf);
        run(&["pretrain"], dir, &conf);
    }
    run(&["meta-train"], &a, &conf);
    run(&["meta-train"], &b, &short);
    let partial = b.join("partial.ckpt");
    fs::rename(b.join("meta-ours.ckpt"), &partial).unwrap();
    run(
        &["meta-train", "--resume", partial.to_str().unwrap()],
        &b,
        &conf,
    );
    for name in ["meta-ours.ckpt", "meta_curve-ours.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = std::process::Command::new(env!("CARGO_BIN_EXE_metasbir"))
        .args(["gen-data", "--config", fixture().to_str().unwrap()])
        .env("METASBIR_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("items.jsonl").exists());
}
