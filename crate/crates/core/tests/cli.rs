use std::path::Path;
use std::process::{Command, Output};

fn teekv(args: &[&str], store: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teekv"))
        .args(args)
        .env("TEEKV_STORE_ROOT", store)
        .env_remove("TEEKV_HUK")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn kv_storage_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let res = dir.path().join("res");
    let r = res.to_str().unwrap();

    let out = teekv(&["bench", "kv", "--workload", "put,mix50", "--shm", "whole,ree", "--rates", "1..4", "--ops", "16", "--seed", "7", "--out", r], &store);
    ok(&out);
    let kv = std::fs::read_to_string(res.join("kv.csv")).unwrap();
    // header + 2 workloads x 2 modes x 3 rates x 16 ops
    assert_eq!(kv.lines().count(), 1 + 2 * 2 * 3 * 16);
    assert!(String::from_utf8_lossy(&out.stdout).contains("MIX50"));

    let out = teekv(&["bench", "storage", "--sizes", "256,4096", "--reps", "2", "--verify", "--out", r], &store);
    ok(&out);
    let st = std::fs::read_to_string(res.join("storage.csv")).unwrap();
    assert_eq!(st.lines().count(), 1 + 2 * 3 * 2);

    let rep = dir.path().join("rep");
    for format in ["csv", "summary", "gnuplot"] {
        let out = teekv(
            &["report", "--format", format, "--out", rep.to_str().unwrap(), res.join("kv.csv").to_str().unwrap(), res.join("storage.csv").to_str().unwrap()],
            &store,
        );
        ok(&out);
    }
    for f in ["samples.csv", "summary.csv", "summary_workloads.csv", "kv_whole.dat", "kv_ree.dat", "kv.gp", "storage.dat", "storage.gp"] {
        assert!(rep.join(f).is_file(), "missing {f}");
    }
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let o = out_dir.to_str().unwrap();
    for args in [
        vec!["bench", "kv", "--workload", "scan", "--out", o],
        vec!["bench", "kv", "--rates", "0..4", "--out", o],
        vec!["bench", "storage", "--sizes", "256", "--commands", "append", "--out", o],
        vec!["report", "--format", "html", "--out", o, "missing.csv"],
    ] {
        let out = teekv(&args, dir.path());
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("teekv: "));
    }
    let out = teekv(&["bench", "kv", "--out", o, "--huk", "zz"], dir.path());
    assert!(!out.status.success());
}
