mod common;

use amtkd::adapter::AdapterParams;
use amtkd::io::adapter_to_checkpoint;
use common::*;
use tempfile::tempdir;

fn blobs(dir: &std::path::Path) {
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
            "3",
            "--out",
            "train.akdd",
            "--test-out",
            "test.akdd",
        ],
    );
}

fn teacher(dir: &std::path::Path, seed: &str, out: &str) -> f64 {
    let r = ok(
        dir,
        &[
            "train-teacher",
            "--data",
            "train.akdd",
            "--arch",
            TEACHER,
            "--epochs",
            "8",
            "--seed",
            seed,
            "--out",
            out,
        ],
    );
    field_f64(&r.stdout, "accuracy")
}

#[test]
fn gen_data_writes_expected_size_and_is_reproducible() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    let args = [
        "gen-data",
        "--kind",
        "blobs",
        "--classes",
        "4",
        "--per-class",
        "500",
        "--dim",
        "16",
        "--seed",
        "1",
    ];
    let a = ok(d, &[&args[..], &["--out", "a.akdd"]].concat());
    ok(d, &[&args[..], &["--out", "b.akdd"]].concat());
    assert!(a.stdout.contains("N=2000 K=4 shape=[16]"), "{}", a.stdout);
    assert_eq!(sha256(d.join("a.akdd")), sha256(d.join("b.akdd")));

    let r = amtkd(d, &["gen-data", "--classes", "1", "--out", "c.akdd"]);
    assert_eq!(r.code, 2);
    assert!(!d.join("c.akdd").exists());

    let img = ok(
        d,
        &[
            "gen-data",
            "--kind",
            "images",
            "--classes",
            "3",
            "--per-class",
            "4",
            "--out",
            "i.akdd",
        ],
    );
    assert!(img.stdout.contains("N=12 K=3 shape=[3,8,8]"), "{}", img.stdout);
}

#[test]
fn train_teacher_reports_accuracy_that_eval_reproduces() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    blobs(d);
    let acc = teacher(d, "1", "t.akdc");
    assert!(acc > 0.95, "{acc}");
    let again = teacher(d, "1", "t2.akdc");
    assert_eq!(acc, again);
    assert_eq!(sha256(d.join("t.akdc")), sha256(d.join("t2.akdc")));

    let ev = ok(d, &["eval", "--model", "t.akdc", "--data", "train.akdd"]);
    assert!((field_f64(&ev.stdout, "accuracy") - acc).abs() < 1e-4);
    assert_eq!(ev.stdout.trim(), format!("accuracy={acc:.4}"));
    let ev2 = ok(d, &["eval", "--model", "t.akdc", "--data", "train.akdd"]);
    assert_eq!(ev.stdout, ev2.stdout);
}

#[test]
fn untrained_teacher_still_writes_checkpoint() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    blobs(d);
    let r = ok(
        d,
        &[
            "train-teacher",
            "--data",
            "train.akdd",
            "--arch",
            TEACHER,
            "--epochs",
            "0",
            "--out",
            "t0.akdc",
        ],
    );
    assert!(d.join("t0.akdc").exists());
    let acc = field_f64(&r.stdout, "accuracy");
    assert!((acc - 0.25).abs() < 0.2, "{acc}");
}

#[test]
fn distill_echoes_defaults_and_writes_artifacts() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    blobs(d);
    for (s, t) in [("1", "t1.akdc"), ("2", "t2.akdc"), ("3", "t3.akdc")] {
        teacher(d, s, t);
    }
    let r = ok(
        d,
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
            "2",
            "--lr",
            "0.02",
            "--out",
            "s.akdc",
        ],
    );
    for kv in [
        "temp=5",
        "lambda=0.7",
        "alpha=1",
        "beta=2",
        "batch=128",
        "mapping=best_to_high",
        "triplet_budget=256",
    ] {
        assert!(
            r.stdout.lines().any(|l| l.trim() == kv),
            "missing {kv} in\n{}",
            r.stdout
        );
    }
    for f in ["s.akdc", "s.akdc.adapter", "s.akdc.report.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(d.join("s.akdc.report.csv")).unwrap();
    assert!(report.starts_with("epoch,ce,kd_kl,angle,hint,total,train_acc,test_acc\n"));
    assert_eq!(report.lines().count(), 4);

    // α=β=0 ablation row: only CE and KL remain
    let r = ok(
        d,
        &[
            "distill",
            "--teachers",
            "t1.akdc,t2.akdc",
            "--student-arch",
            STUDENT,
            "--train",
            "train.akdd",
            "--epochs",
            "1",
            "--alpha",
            "0",
            "--beta",
            "0",
            "--out",
            "abl.akdc",
        ],
    );
    assert!(r.stdout.contains("effective_alpha=0") && r.stdout.contains("effective_beta=0"));
    let report = std::fs::read_to_string(d.join("abl.akdc.report.csv")).unwrap();
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[3], row[4]), ("0", "0"));
}

#[test]
fn distill_rejects_wrong_teacher_counts() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    blobs(d);
    teacher(d, "1", "t1.akdc");
    teacher(d, "2", "t2.akdc");
    let base = [
        "distill",
        "--student-arch",
        STUDENT,
        "--train",
        "train.akdd",
        "--epochs",
        "1",
        "--out",
        "s.akdc",
    ];
    for (method, teachers) in [
        ("okd", "t1.akdc,t2.akdc"),
        ("fitnet", "t1.akdc,t2.akdc"),
        ("amtml", "t1.akdc"),
        ("avgmkd", "t1.akdc"),
    ] {
        let r = amtkd(
            d,
            &[&base[..], &["--method", method, "--teachers", teachers]].concat(),
        );
        assert_eq!(r.code, 2, "{method}: {}", r.stderr);
        assert!(r.stderr.contains("teacher"), "{}", r.stderr);
    }
    let r = amtkd(
        d,
        &[&base[..], &["--method", "okd", "--teachers", "t1.akdc"]].concat(),
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
}

#[test]
fn diverging_run_exits_with_numeric_code() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    blobs(d);
    teacher(d, "1", "t1.akdc");
    teacher(d, "2", "t2.akdc");
    let r = amtkd(
        d,
        &[
            "distill",
            "--teachers",
            "t1.akdc,t2.akdc",
            "--student-arch",
            STUDENT,
            "--train",
            "train.akdd",
            "--epochs",
            "2",
            "--lr",
            "1e12",
            "--out",
            "s.akdc",
        ],
    );
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(
        r.stderr.contains("epoch") && r.stderr.contains("batch"),
        "{}",
        r.stderr
    );
}

#[test]
fn eval_errors_exit_two() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    blobs(d);
    teacher(d, "1", "t.akdc");
    assert_eq!(
        amtkd(d, &["eval", "--model", "missing.akdc", "--data", "train.akdd"]).code,
        2
    );
    assert_eq!(
        amtkd(d, &["eval", "--model", "t.akdc", "--data", "missing.akdd"]).code,
        2
    );
    ok(
        d,
        &[
            "gen-data",
            "--classes",
            "3",
            "--per-class",
            "5",
            "--dim",
            "8",
            "--out",
            "k3.akdd",
        ],
    );
    let r = amtkd(d, &["eval", "--model", "t.akdc", "--data", "k3.akdd"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    std::fs::write(d.join("junk.akdc"), b"not a checkpoint").unwrap();
    assert_eq!(
        amtkd(d, &["eval", "--model", "junk.akdc", "--data", "train.akdd"]).code,
        2
    );
}

#[test]
fn unknown_flags_and_config_keys_are_rejected() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        amtkd(d, &["gen-data", "--out", "x.akdd", "--colour", "red"]).code,
        2
    );
    std::fs::write(d.join("bad.cfg"), "colour=red\n").unwrap();
    assert_eq!(
        amtkd(d, &["gen-data", "--config", "bad.cfg", "--out", "x.akdd"]).code,
        2
    );
    assert_eq!(
        amtkd(d, &["gen-data", "--config", "nope.cfg", "--out", "x.akdd"]).code,
        2
    );
    assert_eq!(amtkd(d, &["frobnicate"]).code, 2);
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.cfg"), "# blobs\nclasses = 3\nper_class = 7\ndim=5\n").unwrap();
    let r = ok(
        d,
        &["gen-data", "--config", "run.cfg", "--dim", "6", "--out", "x.akdd"],
    );
    assert!(r.stdout.contains("N=21 K=3 shape=[6]"), "{}", r.stdout);
    assert!(r.stdout.contains("per_class=7"));
}

#[test]
fn inspect_weights_rows_are_distributions() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    blobs(d);
    teacher(d, "1", "t1.akdc");
    teacher(d, "2", "t2.akdc");
    ok(
        d,
        &[
            "distill",
            "--teachers",
            "t1.akdc,t2.akdc",
            "--student-arch",
            STUDENT,
            "--train",
            "train.akdd",
            "--epochs",
            "2",
            "--lr",
            "0.02",
            "--beta",
            "0.05",
            "--out",
            "s.akdc",
        ],
    );
    let r = ok(
        d,
        &[
            "inspect-weights",
            "--adapter",
            "s.akdc.adapter",
            "--student",
            "s.akdc",
            "--teachers",
            "t1.akdc,t2.akdc",
            "--data",
            "test.akdd",
            "--out",
            "w.csv",
            "--summary",
        ],
    );
    assert_eq!(r.stdout.lines().filter(|l| l.starts_with("# class")).count(), 4);
    let csv = std::fs::read_to_string(d.join("w.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("example_id,label,w_1,w_2"));
    let mut rows = 0;
    for line in lines {
        let w: f64 = line.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        // six printed decimals per weight
        assert!((w - 1.0).abs() < 2e-6, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 80);

    // an adapter with identical θ weights every teacher equally
    adapter_to_checkpoint(&AdapterParams::tied(2, 8, 5).unwrap())
        .write(d.join("fresh.adapter"))
        .unwrap();
    let r = ok(
        d,
        &[
            "inspect-weights",
            "--adapter",
            "fresh.adapter",
            "--student",
            "s.akdc",
            "--teachers",
            "t1.akdc,t2.akdc",
            "--data",
            "test.akdd",
        ],
    );
    for line in r.stdout.lines().skip(1) {
        assert!(line.ends_with(",0.500000,0.500000"), "{line}");
    }

    let r = amtkd(
        d,
        &[
            "inspect-weights",
            "--adapter",
            "s.akdc.adapter",
            "--student",
            "s.akdc",
            "--teachers",
            "t1.akdc",
            "--data",
            "test.akdd",
        ],
    );
    assert_eq!(r.code, 2);
    adapter_to_checkpoint(&AdapterParams::new(2, 5, 5).unwrap())
        .write(d.join("narrow.adapter"))
        .unwrap();
    let r = amtkd(
        d,
        &[
            "inspect-weights",
            "--adapter",
            "narrow.adapter",
            "--student",
            "s.akdc",
            "--teachers",
            "t1.akdc,t2.akdc",
            "--data",
            "test.akdd",
        ],
    );
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn full_pipeline_is_reproducible() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let (fa, ea) = pipeline(a.path(), "7");
    let (fb, eb) = pipeline(b.path(), "7");
    assert_eq!(ea, eb);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(sha256(x), sha256(y), "{}", x.display());
    }
    let c = tempdir().unwrap();
    let (fc, _) = pipeline(c.path(), "8");
    assert_ne!(sha256(&fa[5]), sha256(&fc[5]));
}
