//! Drive the `ccfi` binary end to end: subcommands, exit codes, and the
//! machine-readable output contract.

use serde::Deserialize;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ccfi() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ccfi"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run_ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_prints_output_and_exits_zero() {
    let out = ccfi()
        .args(["run"])
        .arg(fixtures().join("benign/01_hello.ir"))
        .output()
        .unwrap();
    assert_eq!(run_ok(&out).trim(), "42");
}

#[test]
fn run_under_attack_exits_two_with_violation_message() {
    let out = ccfi()
        .args(["run"])
        .arg(fixtures().join("scenarios/s1_cross_swap.ir"))
        .arg("--attack")
        .arg(fixtures().join("scenarios/s1_cross_swap.atk"))
        .args(["--entropy", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CCFI violation"));
}

#[test]
fn baseline_run_is_hijackable_where_instrumented_run_traps() {
    let prog = fixtures().join("scenarios/s2_replay.ir");
    let atk = fixtures().join("scenarios/s2_replay.atk");
    // replay is the documented bypass either way; contrast with s1 which
    // needs instrumentation to be detected
    let out = ccfi()
        .args(["run"])
        .arg(&prog)
        .arg("--attack")
        .arg(&atk)
        .args(["--entropy", "0", "--reuse-heap"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.trim(), "111\n111", "replay reruns the old handler");
}

#[test]
fn emit_ir_output_is_reparseable_input() {
    let out = ccfi()
        .args(["emit-ir"])
        .arg(fixtures().join("benign/08_fptr_local.ir"))
        .output()
        .unwrap();
    let text = run_ok(&out);
    assert!(text.contains("macptr"));
    assert!(text.contains("checkptr"));
    assert!(text.contains("__ccfi_init"));
    // feeding the emitted IR back through the tool must work: it is
    // already instrumented, so run it as a baseline
    let tmp = std::env::temp_dir().join("ccfi_emit_roundtrip.ir");
    std::fs::write(&tmp, &text).unwrap();
    let rerun = ccfi()
        .args(["run", "--baseline"])
        .arg(&tmp)
        .output()
        .unwrap();
    assert_eq!(run_ok(&rerun).trim(), "42");
    std::fs::remove_file(&tmp).ok();
}

#[test]
fn analyze_exit_codes_split_clean_from_hazardous() {
    let clean = ccfi()
        .args(["analyze"])
        .arg(fixtures().join("benign/20_rawcopy_int.ir"))
        .output()
        .unwrap();
    assert_eq!(clean.status.code(), Some(0));

    let dirty = ccfi()
        .args(["analyze"])
        .arg(fixtures().join("hazards/dyn_array.ir"))
        .output()
        .unwrap();
    assert_eq!(dirty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&dirty.stdout).contains("fnptr-cast-to-raw"));

    // advisory-only reports exit 0
    let advisory = ccfi()
        .args(["analyze"])
        .arg(fixtures().join("hazards/oracle.ir"))
        .output()
        .unwrap();
    assert_eq!(advisory.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&advisory.stdout).contains("oracle-exposure"));
}

#[test]
fn scenarios_pass_and_json_lines_round_trip() {
    let out = ccfi()
        .args(["scenarios", "--format", "json-lines"])
        .output()
        .unwrap();
    let text = run_ok(&out);

    #[derive(Deserialize)]
    struct Line {
        name: String,
        pass: bool,
        expected: String,
        actual: String,
        trials: u32,
        detail: String,
    }
    let mut count = 0;
    for line in text.lines() {
        let parsed: Line = serde_json::from_str(line).expect("valid json line");
        assert!(parsed.pass, "{} failed: {}", parsed.name, parsed.detail);
        assert!(!parsed.expected.is_empty() && !parsed.actual.is_empty());
        assert_eq!(parsed.trials, 1);
        count += 1;
    }
    assert_eq!(count, 8);
}

#[test]
fn user_scenario_manifests_extend_the_suite() {
    let dir = std::env::temp_dir().join("ccfi_user_suite");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(
        dir.join("prog.ir"),
        "fn main() -> int64 { attack_point \"p\"\n print 5\n ret 0 }",
    )
    .unwrap();
    std::fs::write(
        dir.join("noop.toml"),
        r#"
name = "user-noop"
program = "prog.ir"
expected = "unaffected"
"#,
    )
    .unwrap();
    let out = ccfi().arg("scenarios").arg(&dir).output().unwrap();
    let text = run_ok(&out);
    assert!(text.contains("user-noop"));
    assert!(text.contains("9 scenario(s), 9 passed"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn scenario_expectation_mismatch_exits_four() {
    let dir = std::env::temp_dir().join("ccfi_bad_suite");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(
        dir.join("prog.ir"),
        "fn main() -> int64 { attack_point \"p\"\n print 5\n ret 0 }",
    )
    .unwrap();
    // expects a detection that cannot happen
    std::fs::write(
        dir.join("wrong.toml"),
        r#"
name = "user-wrong"
program = "prog.ir"
expected = "detected"
"#,
    )
    .unwrap();
    let out = ccfi().arg("scenarios").arg(&dir).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn replay_mc_reports_frequency() {
    #[derive(Deserialize)]
    struct Record {
        trials: u32,
        hits: u32,
        frequency: f64,
        entropy_bits: u32,
    }
    let out = ccfi()
        .args(["replay-mc"])
        .arg(fixtures().join("replay/depth1.ir"))
        .arg(fixtures().join("replay/replay.atk"))
        .args(["--trials", "1600", "--entropy", "4", "--format", "json-lines"])
        .output()
        .unwrap();
    let text = run_ok(&out);
    let rec: Record = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(rec.trials, 1600);
    assert_eq!(rec.entropy_bits, 4);
    assert!(rec.hits > 0);
    assert!((rec.frequency - 0.0625).abs() < 0.03);
}

#[test]
fn bench_emits_schema_stable_json_lines() {
    #[derive(Deserialize)]
    struct Record {
        program: String,
        baseline_steps: u64,
        instrumented_steps: u64,
        delta_steps: u64,
        calls: u64,
        mac_ops: u64,
        overhead: f64,
    }
    let out = ccfi()
        .args(["bench"])
        .arg(fixtures().join("bench"))
        .args(["--format", "json-lines"])
        .output()
        .unwrap();
    let text = run_ok(&out);
    let mut empties = Vec::new();
    for line in text.lines() {
        let r: Record = serde_json::from_str(line).expect("valid bench json");
        assert!(r.instrumented_steps >= r.baseline_steps, "{}", r.program);
        assert_eq!(r.delta_steps, r.instrumented_steps - r.baseline_steps);
        assert!(r.overhead >= 1.0);
        assert!(r.calls > 0);
        let _ = r.mac_ops;
        if r.program.starts_with("empty") {
            empties.push(r.delta_steps);
        }
    }
    assert_eq!(empties.len(), 5);
    assert!(empties.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn input_errors_exit_five() {
    let out = ccfi().args(["run", "/nonexistent.ir"]).output().unwrap();
    assert_eq!(out.status.code(), Some(5));

    let tmp = std::env::temp_dir().join("ccfi_bad_prog.ir");
    std::fs::write(&tmp, "fn main() { icall 5() }").unwrap();
    let out = ccfi().args(["run"]).arg(&tmp).output().unwrap();
    assert_eq!(out.status.code(), Some(5), "typecheck failure is an input error");
    std::fs::remove_file(&tmp).ok();
}

#[test]
fn run_json_lines_serializes_the_result() {
    let out = ccfi()
        .args(["run"])
        .arg(fixtures().join("benign/03_loop_sum.ir"))
        .args(["--format", "json-lines"])
        .output()
        .unwrap();
    let text = run_ok(&out);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(v["output"][0], 55);
    assert_eq!(v["outcome"]["outcome"], "halted");
    assert!(v["counters"]["steps"].as_u64().unwrap() > 0);
}

#[test]
fn direct_mapped_table_mode_is_accepted() {
    let out = ccfi()
        .args(["run"])
        .arg(fixtures().join("benign/06_fptr_global.ir"))
        .args(["--mac-table", "direct:256"])
        .output()
        .unwrap();
    assert_eq!(run_ok(&out).trim(), "42");

    let bad = ccfi()
        .args(["run"])
        .arg(fixtures().join("benign/06_fptr_global.ir"))
        .args(["--mac-table", "direct:300"])
        .output()
        .unwrap();
    assert_ne!(bad.status.code(), Some(0));
}
