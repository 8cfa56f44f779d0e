use std::time::Duration;

use exprag_core::env::{connect_external, EnvError, Environment, LaunchSpec, TaskKind, TaskSpec};

fn stub() -> LaunchSpec {
    LaunchSpec::new(env!("CARGO_BIN_EXE_exprag-stub-env")).timeout(Duration::from_secs(10))
}

fn spec() -> TaskSpec {
    TaskSpec::new(TaskKind::PickAndPlace, "mug", "shelf", 3)
}

#[test]
fn reset_is_proxied_verbatim() {
    let mut env = connect_external(&stub()).unwrap();
    let obs = env.reset(&spec()).unwrap();
    let expected = format!(
        "stub world ready: {}",
        serde_json::to_value(spec()).unwrap()
    );
    assert_eq!(obs, expected);
    assert_eq!(env.name(), "external");
}

#[test]
fn hundred_steps_have_matched_increasing_ids() {
    let mut env = connect_external(&stub()).unwrap();
    env.reset(&spec()).unwrap();
    for i in 0..100 {
        let r = env.step(&format!("go to shelf {i}")).unwrap();
        assert_eq!(r.observation, format!("echo: go to shelf {i}"));
        assert!(!r.done);
    }
    let log = env.protocol_log();
    assert_eq!(log.len(), 101);
    assert!(log.iter().all(|x| x.request_id == x.reply_id));
    assert!(log.windows(2).all(|w| w[1].request_id > w[0].request_id));

    let last = env.step("finish").unwrap();
    assert!(last.done && last.success);
    assert!(matches!(env.step("look"), Err(EnvError::EpisodeDone)));
}

#[test]
fn malformed_reply_carries_raw_line() {
    let mut env = connect_external(&stub().arg("--garbage-after").arg("2")).unwrap();
    env.reset(&spec()).unwrap();
    match env.step("look") {
        Err(EnvError::Protocol { raw, .. }) => assert_eq!(raw, "this is not json"),
        other => panic!("expected protocol error, got {other:?}"),
    }
}

#[test]
fn mismatched_id_is_a_protocol_error() {
    let mut env = connect_external(&stub().arg("--wrong-id-after").arg("1")).unwrap();
    let err = env.reset(&spec()).unwrap_err();
    assert!(matches!(err, EnvError::Protocol { .. }), "{err}");
}

#[test]
fn silent_child_times_out() {
    let mut env =
        connect_external(&stub().arg("--silent").timeout(Duration::from_millis(300))).unwrap();
    assert!(matches!(env.reset(&spec()), Err(EnvError::Timeout(_))));
}

#[test]
fn early_exit_is_a_handshake_failure() {
    let mut env = connect_external(&stub().arg("--exit-immediately")).unwrap();
    let err = env.reset(&spec()).unwrap_err();
    assert!(matches!(err, EnvError::Handshake(_)), "{err}");
}

#[test]
fn missing_program_is_a_handshake_failure() {
    let err = connect_external(&LaunchSpec::new("/nonexistent/exprag-env")).unwrap_err();
    assert!(matches!(err, EnvError::Handshake(_)));
}
