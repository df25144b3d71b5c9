use std::path::Path;
use std::process::{Command, Output};

fn cls2det(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cls2det"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn gen(dir: &Path) {
    let o = cls2det(&[
        "gen-data",
        "--num-train",
        "24",
        "--num-val",
        "6",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let out = out.to_str().unwrap();
    assert_eq!(
        code(&cls2det(&["gen-data", "--classes", "1", "--out", out])),
        2
    );
    assert_eq!(code(&cls2det(&["gradcheck", "--op", "no_such_op"])), 2);
    assert_eq!(code(&cls2det(&["no-such-command"])), 2);

    gen(Path::new(out));
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learning_rate": 0.1}"#).unwrap();
    let o = cls2det(&[
        "train-teacher",
        "--data",
        out,
        "--out",
        tmp.path().join("t").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    // Classification distillation without a teacher.
    let o = cls2det(&[
        "train-student",
        "--data",
        out,
        "--out",
        tmp.path().join("s").to_str().unwrap(),
        "--kd-cls",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("teacher"));
}

#[test]
fn io_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let m = missing.to_str().unwrap();
    assert_eq!(
        code(&cls2det(&["train-teacher", "--data", m, "--out", m])),
        3
    );
    let data = tmp.path().join("d");
    gen(&data);
    let junk = tmp.path().join("junk.kdck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let report = tmp.path().join("r.json");
    let o = cls2det(&[
        "eval",
        "--model",
        junk.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_filters_and_flags_a_broken_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let json = tmp.path().join("g.json");
    let o = cls2det(&[
        "gradcheck",
        "--op",
        "softmax",
        "--seeds",
        "2",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let rows: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let names: Vec<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["softmax_t"]);
    assert_eq!(
        code(&cls2det(&[
            "gradcheck",
            "--op",
            "corrupted",
            "--seeds",
            "2",
            "--corrupt-backward"
        ])),
        1
    );
}

#[test]
fn short_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    gen(Path::new(&p("d")));
    let run = |args: &[&str]| {
        let o = cls2det(args);
        assert_eq!(
            code(&o),
            0,
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
    };
    run(&[
        "train-teacher",
        "--data",
        &p("d"),
        "--out",
        &p("t"),
        "--epochs",
        "1",
    ]);
    run(&[
        "train-student",
        "--data",
        &p("d"),
        "--out",
        &p("s"),
        "--teacher",
        &p("t/teacher.kdck"),
        "--kd-cls",
        "--head",
        "binary",
        "--epochs",
        "1",
    ]);
    run(&[
        "eval",
        "--model",
        &p("t/teacher.kdck"),
        "--data",
        &p("d"),
        "--out",
        &p("teval.json"),
    ]);
    run(&[
        "eval",
        "--model",
        &p("s/student.kdck"),
        "--data",
        &p("d"),
        "--out",
        &p("seval.json"),
    ]);
    run(&[
        "error-analysis",
        "--model",
        &p("s/student.kdck"),
        "--data",
        &p("d"),
        "--out",
        &p("err.json"),
    ]);
    for f in [
        "t/metrics.jsonl",
        "t/config.json",
        "s/metrics.jsonl",
        "s/config.json",
        "teval.json",
        "seval.json",
        "err.csv",
    ] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("err.csv")).unwrap();
    // Header plus one row per threshold and error type.
    assert_eq!(csv.lines().count(), 1 + 9 * 6);
    let cfg: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("s/config.json")).unwrap()).unwrap();
    assert_eq!(cfg["head"], "binary");
}
