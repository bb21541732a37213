#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.conf")
}

pub fn metasbir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metasbir"))
        .args(args)
        .env_remove("METASBIR_OUT")
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn metasbir")
}

/// Runs every pipeline command on the fixture into `out`, single-threaded.
pub fn pipeline(out: &Path) -> Vec<(String, Output)> {
    let config = fixture();
    let config = config.to_str().unwrap();
    let out = out.to_str().unwrap();
    let steps: [&[&str]; 7] = [
        &["gen-data"],
        &["pretrain"],
        &["meta-train"],
        &["meta-train", "--variant", "fixed-margin"],
        &[
            "eval",
            "--methods",
            "ours,no-adapt,fine-tune,fixed-margin",
            "--k",
            "1,2",
        ],
        &["ablate"],
        &["check-grads", "--seeds", "2"],
    ];
    steps
        .iter()
        .map(|step| {
            let mut args: Vec<&str> = step.to_vec();
            if step[0] != "check-grads" {
                args.extend(["--config", config]);
            }
            args.extend(["--out", out, "--threads", "1"]);
            (step.join(" "), metasbir(&args))
        })
        .collect()
}

/// File name -> contents of every file in `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}
