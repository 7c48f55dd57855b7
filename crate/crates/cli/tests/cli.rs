//! End-to-end tests of the `cfw` binary: exit codes, output contracts,
//! and determinism of every subcommand.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cfw() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfw"))
}

fn run(args: &[&str]) -> Output {
    cfw().args(args).output().expect("spawn cfw")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Builds a small synthetic corpus and a trained model in `dir`.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("corpus.tsv");
    let model = dir.join("model.cfw");
    let out = run(&[
        "synth",
        "--users",
        "600",
        "--items",
        "40",
        "--plant",
        "8,9,2.5",
        "--seed",
        "42",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "synth failed: {out:?}");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--seed",
        "42",
    ]);
    assert!(out.status.success(), "train failed: {out:?}");
    (data, model)
}

#[test]
fn train_reports_counters_and_writes_model() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    assert!(model.exists());
    let out = run(&["inspect", "--model", model.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("n_users 600"));
    assert!(text.contains("items 40"));
    assert!(text.contains("f 40"));
}

#[test]
fn missing_input_files_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        "/nonexistent/corpus.tsv",
        "--out",
        dir.path().join("m.cfw").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let out = run(&["recommend", "--model", "/nonexistent/m.cfw", "--items", "A"]);
    assert!(!out.status.success());
}

#[test]
fn f_one_caps_every_list_on_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus.tsv");
    let model = dir.path().join("model.cfw");
    run(&[
        "synth",
        "--users",
        "300",
        "--items",
        "20",
        "--mean-items",
        "2.5",
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ]);
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--f",
        "1",
    ]);
    assert!(out.status.success());
    for item in ["i0000", "i0005", "i0019"] {
        let out = run(&[
            "inspect",
            "--model",
            model.to_str().unwrap(),
            "--item",
            item,
        ]);
        assert!(out.status.success());
        let text = stdout_of(&out);
        let predict_rows = text
            .lines()
            .skip_while(|l| !l.starts_with("predict_list"))
            .skip(1)
            .take_while(|l| !l.starts_with("similar_list"))
            .count();
        assert!(predict_rows <= 1, "item {item} has {predict_rows} rows");
    }
}

#[test]
fn single_evidence_recommendations_match_across_combiners() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    let m = run(&[
        "recommend",
        "--model",
        model.to_str().unwrap(),
        "--items",
        "i0008",
        "--mode",
        "cfwm",
    ]);
    let p = run(&[
        "recommend",
        "--model",
        model.to_str().unwrap(),
        "--items",
        "i0008",
        "--mode",
        "cfwp",
    ]);
    assert!(m.status.success() && p.status.success());
    assert_eq!(stdout_of(&m), stdout_of(&p));
    assert!(stdout_of(&m).lines().count() > 1);
}

#[test]
fn top_zero_prints_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    let out = run(&[
        "recommend",
        "--model",
        model.to_str().unwrap(),
        "--items",
        "i0001",
        "--top",
        "0",
    ]);
    assert!(out.status.success());
    assert_eq!(stdout_of(&out), "rank\titem\tscore\tomega\n");
}

#[test]
fn unknown_evidence_warns_and_falls_back_to_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    let out = run(&[
        "recommend",
        "--model",
        model.to_str().unwrap(),
        "--items",
        "no-such-item",
    ]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not in the model vocabulary"), "stderr: {err}");
    assert!(err.contains("baseline"), "stderr: {err}");
    // Baseline output starts with the most popular item.
    let text = stdout_of(&out);
    assert!(text.lines().nth(1).unwrap().contains("i0000"));
}

#[test]
fn similar_respects_threshold_and_rejects_unknown_items() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    let out = run(&[
        "similar",
        "--model",
        model.to_str().unwrap(),
        "--item",
        "i0008",
    ]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("i0009"), "planted partner missing: {text}");
    let omegas: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(
        omegas.windows(2).all(|w| w[0] >= w[1]),
        "not sorted: {omegas:?}"
    );

    let out = run(&[
        "similar",
        "--model",
        model.to_str().unwrap(),
        "--item",
        "i0008",
        "--threshold",
        "99",
    ]);
    assert!(out.status.success());
    assert_eq!(stdout_of(&out), "rank\titem\tomega_p05\n");

    let out = run(&[
        "similar",
        "--model",
        model.to_str().unwrap(),
        "--item",
        "zzz",
    ]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_given_1_identical_for_both_combiners_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = fixture(dir.path());
    let eval = |algo: &str, seed: &str| {
        let out = run(&[
            "evaluate",
            "--model",
            model.to_str().unwrap(),
            "--test",
            data.to_str().unwrap(),
            "--protocol",
            "given-1",
            "--algo",
            algo,
            "--seed",
            seed,
        ]);
        assert!(out.status.success(), "{out:?}");
        stdout_of(&out)
    };
    let strip_qps = |text: &str| -> String {
        text.lines()
            .filter(|l| !l.starts_with("queries_per_second"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let m = eval("cfwm", "3");
    let p = eval("cfwp", "3");
    let score_of = |text: &str| {
        text.lines()
            .find(|l| l.starts_with("score"))
            .unwrap()
            .to_string()
    };
    assert_eq!(score_of(&m), score_of(&p));
    let again = eval("cfwm", "3");
    assert_eq!(strip_qps(&m), strip_qps(&again));
}

#[test]
fn evaluate_writes_per_user_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = fixture(dir.path());
    let per_user = dir.path().join("per_user.tsv");
    let out = run(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--test",
        data.to_str().unwrap(),
        "--protocol",
        "all-but-1",
        "--per-user-out",
        per_user.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let table = std::fs::read_to_string(&per_user).unwrap();
    assert!(table.starts_with("user\tscore\n"));
    assert!(table.lines().count() > 100);
}

#[test]
fn bad_protocol_and_bad_mode_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = fixture(dir.path());
    let out = run(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--test",
        data.to_str().unwrap(),
        "--protocol",
        "given-zero",
    ]);
    assert!(!out.status.success());
    let out = run(&[
        "recommend",
        "--model",
        model.to_str().unwrap(),
        "--items",
        "i0001",
        "--mode",
        "bogus",
    ]);
    assert!(!out.status.success());
}

#[test]
fn synth_is_deterministic_and_validates_plants() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    for path in [&a, &b] {
        let out = run(&[
            "synth",
            "--users",
            "200",
            "--items",
            "15",
            "--mean-items",
            "2.5",
            "--seed",
            "9",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{out:?}");
    }
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "same seed must give identical files"
    );
    // Round-trips through the loader: retraining works on the file.
    let model = dir.path().join("m.cfw");
    let out = run(&[
        "train",
        "--data",
        a.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success());

    // Popular item vs huge omega cannot stay inside [0,1].
    let out = run(&[
        "synth",
        "--users",
        "100",
        "--items",
        "15",
        "--mean-items",
        "3",
        "--plant",
        "0,14,6.0",
        "--seed",
        "9",
        "--out",
        dir.path().join("bad.tsv").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("infeasible"), "stderr: {err}");
}

#[test]
fn inspect_pair_reproduces_the_reference_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    // 1638 users reproducing counts [[1621,3],[10,4]] for the pair (A,B).
    let mut lines = String::new();
    let mut n = 0usize;
    let push = |liked: &str, n: &mut usize, lines: &mut String| {
        lines.push_str(&format!("u{n:04}\t{liked}\n"));
        *n += 1;
    };
    for _ in 0..4 {
        push("A B", &mut n, &mut lines);
    }
    for _ in 0..3 {
        push("A", &mut n, &mut lines);
    }
    for _ in 0..10 {
        push("B", &mut n, &mut lines);
    }
    for _ in 0..1621 {
        push("F", &mut n, &mut lines);
    }
    let data = dir.path().join("anchor.tsv");
    std::fs::write(&data, lines).unwrap();
    let model = dir.path().join("anchor.cfw");
    let out = run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let out = run(&[
        "inspect",
        "--model",
        model.to_str().unwrap(),
        "--pair",
        "A,B",
        "--data",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("counts a=1621 b=3 c=10 d=4"), "{text}");
    let field = |key: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("missing {key}"))
            .split_whitespace()
            .nth(1)
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((field("omega_eff") - 4.9).abs() <= 0.2);
    assert!((field("omega_p05") - 3.8).abs() <= 0.2);
    assert!((field("omega_ml") - 5.0413).abs() <= 0.001);

    let out = run(&[
        "inspect",
        "--model",
        model.to_str().unwrap(),
        "--item",
        "nope",
    ]);
    assert!(!out.status.success());
}
