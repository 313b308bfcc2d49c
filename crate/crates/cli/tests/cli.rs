//! End-to-end checks of the binary: exit codes, determinism of emitted
//! traces, the report round trip, and usage errors.

use std::path::PathBuf;
use std::process::{Command, Output};

fn gkm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gkm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    let mut p = std::env::temp_dir();
    p.push(format!("gkm-cli-test-{}-{name}", std::process::id()));
    p
}

#[test]
fn run_walkthrough_passes_and_reports_join_cost() {
    let out = gkm(&["run", "--scenario", "walkthrough"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("(M, U) = (h, 1) = (3, 1)"), "{text}");
    assert!(text.contains("RESULT: PASS"), "{text}");
}

#[test]
fn run_emits_deterministic_records() {
    let a = gkm(&["run", "--scenario", "walkthrough", "--seed", "7", "--format", "records"]);
    let b = gkm(&["run", "--scenario", "walkthrough", "--seed", "7", "--format", "records"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(!a.stdout.is_empty());
}

#[test]
fn report_recomputes_written_trace() {
    let trace = tmp("trace.jsonl");
    let run = gkm(&["run", "--scenario", "walkthrough", "--out", trace.to_str().unwrap()]);
    assert!(run.status.success());
    let rep = gkm(&["report", "--trace", trace.to_str().unwrap()]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    let text = String::from_utf8_lossy(&rep.stdout);
    assert!(text.contains("ledger recomputation from messages: exact"), "{text}");
    assert!(text.contains("RESULT: PASS"));
    std::fs::remove_file(&trace).ok();
}

#[test]
fn report_rejects_truncated_trace() {
    let trace = tmp("truncated.jsonl");
    let run = gkm(&["run", "--scenario", "walkthrough", "--out", trace.to_str().unwrap()]);
    assert!(run.status.success());
    let full = std::fs::read_to_string(&trace).unwrap();
    // Cut into the middle of a line.
    let cut = full.len() - 25;
    std::fs::write(&trace, &full[..cut]).unwrap();
    let rep = gkm(&["report", "--trace", trace.to_str().unwrap()]);
    assert_eq!(rep.status.code(), Some(2), "{}", String::from_utf8_lossy(&rep.stdout));
    let err = String::from_utf8_lossy(&rep.stderr);
    assert!(err.contains("line"), "{err}");
    std::fs::remove_file(&trace).ok();
}

#[test]
fn malformed_scenario_reports_line_number() {
    let path = tmp("bad-scenario.jsonl");
    std::fs::write(
        &path,
        "{\"record\":\"scenario\",\"version\":1,\"seed\":1,\"field_bits\":8,\
         \"hash\":\"sha256\",\"cipher\":\"stream-mac\"}\n{\"record\":\"oops\"}\n",
    )
    .unwrap();
    let out = gkm(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
    std::fs::remove_file(&path).ok();
}

#[test]
fn scenario_with_unknown_member_fails() {
    let path = tmp("unknown-member.jsonl");
    let mut scenario = gkm_core::simnet::Scenario::walkthrough();
    scenario
        .events
        .push(gkm_core::simnet::ScenarioEvent::Leave { member: "uZZ".into() });
    std::fs::write(&path, scenario.to_jsonl()).unwrap();
    let out = gkm(&["run", "--scenario", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_file(&path).ok();
}

#[test]
fn report_of_event_free_trace_is_all_zero() {
    let path = tmp("empty-trace.jsonl");
    std::fs::write(
        &path,
        "{\"record\":\"trace\",\"version\":1,\"seed\":0,\"field_bits\":8,\
         \"hash\":\"sha256\",\"cipher\":\"stream-mac\",\"subgroups\":[]}\n",
    )
    .unwrap();
    let rep = gkm(&["report", "--trace", path.to_str().unwrap()]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    let text = String::from_utf8_lossy(&rep.stdout);
    assert!(text.contains("events: 0"), "{text}");
    std::fs::remove_file(&path).ok();
}

#[test]
fn fuzz_zero_iterations_trivially_passes() {
    let out = gkm(&["fuzz", "--iterations", "0"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("RESULT: PASS"), "{text}");
}

#[test]
fn fuzz_short_campaign_passes() {
    let out = gkm(&["fuzz", "--iterations", "300", "--seed", "11"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("forward secrecy: 0 sealed opens"), "{text}");
    assert!(text.contains("RESULT: PASS"), "{text}");
}

#[test]
fn fuzz_broken_cipher_negative_control() {
    let out = gkm(&["fuzz", "--iterations", "300", "--seed", "11", "--broken-cipher"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("negative control detected"), "{text}");
}
