#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub const BIN: &str = env!("CARGO_BIN_EXE_amtkd");

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn amtkd(dir: &Path, args: &[&str]) -> Run {
    let Output {
        status,
        stdout,
        stderr,
    } = Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    Run {
        code: status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&stdout).into_owned(),
        stderr: String::from_utf8_lossy(&stderr).into_owned(),
    }
}

/// Runs and insists on exit 0.
pub fn ok(dir: &Path, args: &[&str]) -> Run {
    let r = amtkd(dir, args);
    assert_eq!(
        r.code, 0,
        "amtkd {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        r.stdout, r.stderr
    );
    r
}

pub fn sha256(path: impl AsRef<Path>) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).expect("file exists")))
}

/// Value of the first `key=value` token in `text`.
pub fn field(text: &str, key: &str) -> Option<String> {
    text.split_whitespace()
        .find_map(|tok| tok.strip_prefix(key)?.strip_prefix('=').map(str::to_string))
}

pub fn field_f64(text: &str, key: &str) -> f64 {
    field(text, key)
        .unwrap_or_else(|| panic!("no {key}= in output:\n{text}"))
        .parse()
        .unwrap()
}

pub const TEACHER: &str = "dense:8:32,relu,dense:32:32,relu,dense:32:4";
pub const STUDENT: &str = "dense:8:8,relu,dense:8:8,relu,dense:8:4";

/// gen-data → three teachers → amtml distill → eval, inside `dir`.
/// Returns every artifact path plus the eval stdout.
pub fn pipeline(dir: &Path, seed: &str) -> (Vec<PathBuf>, String) {
    ok(
        dir,
        &[
            "gen-data",
            "--classes",
            "4",
            "--per-class",
            "60",
            "--test-per-class",
            "20",
            "--dim",
            "8",
            "--seed",
            seed,
            "--out",
            "train.akdd",
            "--test-out",
            "test.akdd",
        ],
    );
    for t in 1..=3 {
        let out = format!("t{t}.akdc");
        let s = format!("{seed}{t}");
        ok(
            dir,
            &[
                "train-teacher",
                "--data",
                "train.akdd",
                "--arch",
                TEACHER,
                "--epochs",
                "5",
                "--seed",
                &s,
                "--out",
                &out,
            ],
        );
    }
    ok(
        dir,
        &[
            "distill",
            "--method",
            "amtml",
            "--teachers",
            "t1.akdc,t2.akdc,t3.akdc",
            "--student-arch",
            STUDENT,
            "--train",
            "train.akdd",
            "--test",
            "test.akdd",
            "--epochs",
            "3",
            "--batch",
            "32",
            "--lr",
            "0.02",
            "--beta",
            "0.05",
            "--seed",
            seed,
            "--out",
            "student.akdc",
        ],
    );
    let eval = ok(dir, &["eval", "--model", "student.akdc", "--data", "test.akdd"]).stdout;
    let files = [
        "train.akdd",
        "test.akdd",
        "t1.akdc",
        "t2.akdc",
        "t3.akdc",
        "student.akdc",
        "student.akdc.adapter",
        "student.akdc.report.csv",
    ];
    (files.iter().map(|f| dir.join(f)).collect(), eval)
}
