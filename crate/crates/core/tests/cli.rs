use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sdae::problem::{builtin, classify, load_problem, BUILTINS};

fn sdae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdae"))
        .args(args)
        .current_dir(dir)
        .env_remove("SDAE_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&sdae(d, &["classify", "linear-index1"])), 0);
    assert_eq!(code(&sdae(d, &["no-such-subcommand"])), 1);
    assert_eq!(code(&sdae(d, &["solve", "linear-index1"])), 1);

    fs::write(d.join("bad.sdae"), "[dims]\nn=1 m=1 p=1 d=1\n[drift]\nx1 +\n").unwrap();
    assert_eq!(code(&sdae(d, &["classify", "bad.sdae"])), 2);
    assert_eq!(code(&sdae(d, &["classify", "missing-file"])), 2);

    let o = sdae(d, &["solve", "paper-example", "--method", "index1", "--out", "x"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("D_u g"));
    assert_eq!(code(&sdae(d, &["solve", "paper-example", "--method", "picard", "--out", "x"])), 3);
}

#[test]
fn classify_paper_example_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = sdae(dir.path(), &["classify", "paper-example"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "high-index, UNSDAE, ill-posed (max residual 4.0e-1 at (0,0))");
}

#[test]
fn emitted_builtins_classify_like_the_originals() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in BUILTINS {
        let file = format!("{name}.sdae");
        assert_eq!(code(&sdae(d, &["builtin", name, "--emit", "--out", &file])), 0);
        let text = fs::read_to_string(d.join(&file)).unwrap();
        let reloaded = load_problem(&text).unwrap();
        let original = builtin(name).unwrap();
        assert_eq!(classify(&reloaded), classify(&original), "{name}");

        let from_file = sdae(d, &["classify", &file]);
        let from_name = sdae(d, &["classify", name]);
        assert_eq!(code(&from_file), 0);
        assert_eq!(stdout(&from_file), stdout(&from_name), "{name}");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for t in ["1", "2"] {
        let out = format!("run{t}");
        let args = ["solve", "linear-index1", "--method", "index1", "--paths", "80", "--dt", "0.01", "--seed", "9", "--out", &out, "--threads", t];
        assert_eq!(code(&sdae(d, &args)), 0);
    }
    let a = fs::read(d.join("run1/report.csv")).unwrap();
    let b = fs::read(d.join("run2/report.csv")).unwrap();
    assert_eq!(a, b);
    for k in [0, 41, 79] {
        let f = format!("paths/path_{k:05}.csv");
        assert_eq!(fs::read(d.join("run1").join(&f)).unwrap(), fs::read(d.join("run2").join(&f)).unwrap());
    }
}

#[test]
fn bounded_run_verifies_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sdae(
        d,
        &[
            "solve", "paper-example", "--method", "bounded", "--epsilon", "0.5", "--alpha", "0.8", "--box=-2:2,-5:5",
            "--dt", "1e-3", "--t-end", "0.5", "--paths", "20", "--seed", "42", "--out", "b",
        ],
    );
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("threshold J/(2 eps^2 alpha) = 10"), "{text}");
    assert!(text.contains("b = 11"), "{text}");

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("b/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "solve");
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 21);

    assert_eq!(code(&sdae(d, &["verify-bound", "b", "--epsilon", "0.5", "--alpha", "0.8"])), 0);
    assert!(d.join("b/verify_report.csv").exists());

    let r = sdae(d, &["replay", "b"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read(d.join("b/report.csv")).unwrap(), fs::read(d.join("b/replay/report.csv")).unwrap());
}

#[test]
fn check_and_reduce_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = sdae(d, &["check", "paper-example", "--box=-1:1,-1:1"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("IllPosed"));

    let o = sdae(d, &["reduce", "index2-demo", "--steps", "3"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("index 2"));
}
