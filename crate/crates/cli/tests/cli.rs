use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn lightnl(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lightnl"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.success(),
        String::from_utf8(out.stdout).expect("utf-8 output"),
    )
}

fn json(stdout: &str) -> Value {
    serde_json::from_str(stdout).unwrap_or_else(|e| panic!("invalid JSON ({e}): {stdout}"))
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    let cfg = r#"{
        "epochs": 1,
        "batch_size": 32,
        "data": {"longrange_train": 96, "longrange_test": 64}
    }"#;
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn grad_check_passes_and_lists_every_case() {
    let (ok, out) = lightnl(&["grad-check"]);
    let doc = json(&out);
    assert!(ok, "{out}");
    assert_eq!(doc["status"], "ok");
    let entries = doc["payload"]["entries"].as_array().unwrap();
    assert_eq!(entries.len(), lightnl::verify::grad_case_names().len());
    for name in [
        "matmul",
        "depthwise_conv3x3",
        "lightnl_block",
        "expected_cost",
    ] {
        assert!(entries.iter().any(|e| e["name"] == name), "missing {name}");
    }
}

#[test]
fn grad_check_catches_an_injected_fault() {
    let (ok, out) = lightnl(&["grad-check", "--inject-fault", "depthwise_conv3x3"]);
    let doc = json(&out);
    assert!(!ok);
    assert_eq!(doc["status"], "fail");
    let bad: Vec<&Value> = doc["payload"]["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["passed"] == false)
        .collect();
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0]["name"], "depthwise_conv3x3");
}

#[test]
fn nl_equiv_is_reproducible_and_reports_each_suite() {
    let (ok, a) = lightnl(&["nl-equiv", "--seed", "5"]);
    let (_, b) = lightnl(&["nl-equiv", "--seed", "5"]);
    assert!(ok, "{a}");
    assert_eq!(a, b);
    let names: Vec<String> = json(&a)["payload"]["suites"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        names,
        [
            "associativity",
            "reduction_full",
            "reduction_shared",
            "reduction_compact",
            "reuse"
        ]
    );
}

#[test]
fn flops_csv_matches_json() {
    let (ok, j) = lightnl(&["flops-report"]);
    let (_, c) = lightnl(&["flops-report", "--format", "csv"]);
    assert!(ok);
    let payload = &json(&j)["payload"];
    let rows = payload["rows"].as_array().unwrap();
    let csv_rows: Vec<&str> = c.lines().skip(1).collect();
    assert_eq!(rows.len() + 1, csv_rows.len());
    for (r, line) in rows.iter().zip(&csv_rows) {
        assert_eq!(
            *line,
            format!("{},{}", r["variant"].as_str().unwrap(), r["delta_madds"])
        );
    }
    assert_eq!(
        *csv_rows.last().unwrap(),
        format!("ratio,{}", payload["ratio"])
    );
}

#[test]
fn flops_of_plain_arch_is_the_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let spec = lightnl::supernet::NetworkSpec::toy();
    let arch = lightnl::search::ArchDescription::plain(&spec);
    let path = dir.path().join("arch.json");
    std::fs::write(&path, arch.to_json().unwrap()).unwrap();
    let (ok, out) = lightnl(&["flops-report", "--arch", path.to_str().unwrap()]);
    assert!(ok, "{out}");
    let p = &json(&out)["payload"];
    assert_eq!(p["total"], p["backbone"]);
    assert_eq!(p["inserted"], 0);
    assert_eq!(
        p["backbone"].as_u64().unwrap(),
        spec.backbone_flops().unwrap()
    );
}

#[test]
fn schema_errors_exit_nonzero_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arch.json");
    std::fs::write(&path, r#"{"schema": 99}"#).unwrap();
    let (ok, out) = lightnl(&["flops-report", "--arch", path.to_str().unwrap()]);
    assert!(!ok);
    assert_eq!(json(&out)["status"], "fail");

    let shapes = dir.path().join("shapes.json");
    std::fs::write(&shapes, r#"{"name": "x", "sites": []}"#).unwrap();
    let (ok, out) = lightnl(&["flops-report", "--shapes", shapes.to_str().unwrap()]);
    assert!(!ok);
    assert_eq!(json(&out)["status"], "fail");
}

#[test]
fn zero_kernel_lightnl_evaluates_like_plain() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (ok, plain) = lightnl(&[
        "eval",
        "--arch",
        "plain",
        "--data",
        "longrange",
        "--config",
        &cfg,
    ]);
    assert!(ok, "{plain}");
    let (_, manual) = lightnl(&[
        "eval",
        "--arch",
        "manual",
        "--data",
        "longrange",
        "--config",
        &cfg,
    ]);
    let (p, m) = (json(&plain), json(&manual));
    assert_eq!(p["payload"]["top1"], m["payload"]["top1"]);
    assert_eq!(p["payload"]["loss"], m["payload"]["loss"]);
    assert!(m["payload"]["madds"].as_u64() > p["payload"]["madds"].as_u64());
}

#[test]
fn train_writes_outputs_and_eval_reloads_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let (ok, stdout) = lightnl(&[
        "train",
        "--arch",
        "manual",
        "--data",
        "longrange",
        "--config",
        &cfg,
        "--out",
        out_s,
    ]);
    assert!(ok, "{stdout}");
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,split,loss,top1,flops_expected\n"));
    let test_top1 = json(&stdout)["payload"]["test_top1"].clone();

    let arch = out.join("arch.json");
    let ckpt = out.join("model.ckpt");
    let (ok, ev) = lightnl(&[
        "eval",
        "--arch",
        arch.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        "longrange",
        "--config",
        &cfg,
    ]);
    assert!(ok, "{ev}");
    assert_eq!(json(&ev)["payload"]["top1"], test_top1);
}

#[test]
fn search_then_derive_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("search");
    let (ok, stdout) = lightnl(&[
        "search",
        "--data",
        "longrange",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(ok, "{stdout}");
    for f in [
        "arch.json",
        "history.csv",
        "cost_trajectory.csv",
        "supernet.ckpt",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let searched = json(&stdout)["payload"]["arch"]["locations"].clone();

    let derived_dir = dir.path().join("derive");
    let (ok, stdout) = lightnl(&[
        "derive",
        "--checkpoint",
        out.join("supernet.ckpt").to_str().unwrap(),
        "--data",
        "longrange",
        "--config",
        &cfg,
        "--out",
        derived_dir.to_str().unwrap(),
    ]);
    assert!(ok, "{stdout}");
    assert_eq!(json(&stdout)["payload"]["arch"]["locations"], searched);
}

#[test]
fn missing_mnist_directory_fails_cleanly() {
    let (ok, out) = lightnl(&["eval", "--arch", "plain", "--data", "/nonexistent/mnist"]);
    assert!(!ok);
    let doc = json(&out);
    assert_eq!(doc["status"], "fail");
    assert!(doc["payload"]["error"]
        .as_str()
        .unwrap()
        .contains("nonexistent"));
}
