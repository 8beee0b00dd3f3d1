use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_econvnext")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn describe_traces_tiny_to_logits() {
    let o = run(&["describe", "--preset", "e_convnext_tiny"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let tail: Vec<&str> = text.lines().rev().take(4).collect();
    assert!(tail[0].starts_with("logits") && tail[0].ends_with("1000"), "{tail:?}");
    assert!(tail[3].starts_with("stage4_out") && tail[3].ends_with("1024@7x7"), "{tail:?}");
    let o = run(&["describe", "--preset", "e_convnext_tiny", "--json"]);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(doc["trace"].as_array().unwrap().len() > 5);
}

#[test]
fn flops_text_json_and_macs2() {
    let o = run(&["flops", "--preset", "e_convnext_tiny"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().last().unwrap().contains("PASS"));
    let a = run(&["flops", "--preset", "e_convnext_tiny", "--json"]);
    let b = run(&["flops", "--preset", "e_convnext_tiny", "--json"]);
    assert_eq!(a.stdout, b.stdout);
    let one: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let two: serde_json::Value =
        serde_json::from_slice(&run(&["flops", "--preset", "e_convnext_tiny", "--json", "--macs2"]).stdout).unwrap();
    let total = |v: &serde_json::Value| v["total_flops"].as_u64().unwrap();
    assert_eq!(total(&two), 2 * total(&one));
    assert_eq!(total(&one), 2_025_279_616);
}

#[test]
fn flops_accepts_a_config_file_and_input_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arch.json");
    let o = run(&["describe", "--preset", "e_convnext_narrow", "--json"]);
    let doc: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    std::fs::write(&path, doc["config"].to_string()).unwrap();
    let o = run(&["flops", "--config", path.to_str().unwrap(), "--input", "64", "--json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["input"]["h"], 64);
}

#[test]
fn params_reports_the_target_verdict() {
    let o = run(&["params", "--preset", "e_convnext_tiny"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("13237800") && text.contains("PASS"), "{text}");
}

#[test]
fn verify_suites_succeed() {
    for suite in ["oracle", "grad", "all"] {
        let o = run(&["verify", "--suite", suite, "--seed", "3"]);
        assert!(o.status.success(), "{suite}: {}", stdout(&o));
        assert!(!stdout(&o).contains("FAIL"));
    }
}

#[test]
fn train_generates_data_and_writes_history_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let history = dir.path().join("history.csv");
    let weights = dir.path().join("weights");
    let o = run(&[
        "train",
        "--preset",
        "e_convnext_narrow",
        "--data",
        data.to_str().unwrap(),
        "--generate",
        "24",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--history",
        history.to_str().unwrap(),
        "--save",
        weights.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&history).unwrap();
    assert_eq!(csv, stdout(&o));
    assert_eq!(csv.lines().count(), 3);
    assert!(std::fs::read_dir(&weights).unwrap().count() > 0);
}

#[test]
fn train_without_a_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--preset", "e_convnext_narrow", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn bench_norm_reports_both_timings() {
    let o = run(&["bench-norm", "--h", "8", "--w", "8", "--c", "8", "--batch", "2", "--iters", "2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("layer norm") && text.contains("batch norm"));
}

#[test]
fn reproduce_exit_codes_follow_verdicts() {
    for table in ["table8", "table3"] {
        assert!(run(&["reproduce", table]).status.success(), "{table}");
    }
    let o = run(&["reproduce", "sec311"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let convnext = text.lines().position(|l| l.trim() == "ConvNeXt block").unwrap();
    let verdict = text.lines().skip(convnext).find(|l| l.trim_start().starts_with("total")).unwrap();
    assert!(verdict.ends_with("FAIL"), "{verdict}");
}

#[test]
fn bad_arguments_point_to_usage() {
    for args in [&["flops"][..], &["--bogus"], &["reproduce", "table9"], &["flops", "--preset", "a", "--config", "b"]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr).into_owned();
        assert!(err.contains("Usage") || err.contains("--help"), "{args:?}: {err}");
    }
    let o = run(&["params", "--preset", "no_such_model"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let ok = Command::new(env!("CARGO_BIN_EXE_econvnext"))
        .args(["params", "--preset", "e_convnext_tiny"])
        .env("ECONVNEXT_THREADS", "1")
        .output()
        .unwrap();
    assert!(ok.status.success());
    let bad = Command::new(env!("CARGO_BIN_EXE_econvnext"))
        .args(["params", "--preset", "e_convnext_tiny"])
        .env("ECONVNEXT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("ECONVNEXT_THREADS"));
}
