use std::fs;

use super::*;
use crate::constrained_executor::OutcomeStatus;
use crate::request_plane::ScopeSpec;
use crate::risk_model::SecurityLevel;
use crate::trusted_plane::{GrantDecision, GRANT_VERSION};

struct Env {
    dir: tempfile::TempDir,
    ep: RemoteEndpoint,
    key: ChannelKey,
}

fn env(profile: VerificationProfile, delay_ms: u64) -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("pi-01");
    fs::create_dir_all(root.join("etc")).unwrap();
    fs::create_dir_all(root.join("proc")).unwrap();
    fs::create_dir_all(root.join("tmp")).unwrap();
    fs::write(root.join("etc/os-release"), "ID=fixture\n").unwrap();
    let key = ChannelKey::generate();
    let keyring_path = dir.path().join("pi-01.keyring.json");
    EndpointKeyring::new("pi-01", key.clone()).save(&keyring_path).unwrap();
    let ep = RemoteEndpoint::from_config(&EndpointConfig {
        endpoint_id: "pi-01".into(),
        keyring_path,
        fixture_root: root,
        profile,
        verify_delay_ms: Some(delay_ms),
        allow_direct: false,
    })
    .unwrap();
    Env { dir, ep, key }
}

fn grant(act: Action, obj: ObjectRef, scope: ScopeSpec) -> AuthorizationGrant {
    AuthorizationGrant {
        v: GRANT_VERSION,
        grant_id: format!("g-{}", uuid::Uuid::new_v4()),
        request_digest: "00".repeat(32),
        sid: "s".into(),
        seq: 1,
        act,
        obj,
        decision: GrantDecision::IsolatedAuthorization,
        level: SecurityLevel::L1,
        approved_scope: scope,
        expiry_ms: i64::MAX,
        nonce: "00".repeat(16),
        mac: String::new(),
    }
}

fn envelope(key: &ChannelKey, seq: u64, act: Action, obj: ObjectRef, scope: ScopeSpec) -> RemoteCommandEnvelope {
    RemoteCommandEnvelope {
        v: ENVELOPE_VERSION,
        endpoint_id: "pi-01".into(),
        grant: grant(act, obj.clone(), scope),
        command_spec: CommandSpec {
            act,
            obj,
            content: None,
        },
        channel_seq: seq,
        issued_at_ms: 0,
        envelope_mac: String::new(),
    }
    .seal(key)
}

fn os_release(key: &ChannelKey, seq: u64) -> RemoteCommandEnvelope {
    envelope(
        key,
        seq,
        Action::Read,
        ObjectRef::path("/etc/os-release"),
        ScopeSpec::paths(["/etc/os-release"]).on_endpoint("pi-01"),
    )
}

#[test]
fn valid_envelopes_execute_and_sign() {
    let e = env(VerificationProfile::FastVerify, 0);
    let report = e.ep.execute_and_return(&os_release(&e.key, 1));
    assert_eq!(report.outcome.status, OutcomeStatus::Completed);
    assert_eq!(report.outcome.output.as_deref(), Some("ID=fixture\n"));
    assert!(report.verify(&e.key));

    let uname = envelope(
        &e.key,
        2,
        Action::Execute,
        ObjectRef::command("/tmp", &["uname", "-a"]),
        ScopeSpec::paths(["/tmp"])
            .with_commands(["uname -a"])
            .on_endpoint("pi-01"),
    );
    assert_eq!(e.ep.execute_and_return(&uname).outcome.status, OutcomeStatus::Completed);
    assert_eq!(e.ep.executed(), 2);
}

#[test]
fn tamper_replay_and_misaddressing_are_rejected() {
    let e = env(VerificationProfile::FastVerify, 0);
    let mut flipped = os_release(&e.key, 1);
    flipped.command_spec.obj.target = "/etc/os-releasf".into();
    assert_eq!(
        e.ep.verify_remote_command(&flipped).unwrap_err().code,
        MismatchCode::BadMac
    );

    let ok = os_release(&e.key, 1);
    assert!(e.ep.verify_remote_command(&ok).is_ok());
    assert_eq!(
        e.ep.verify_remote_command(&ok).unwrap_err().code,
        MismatchCode::ChannelReplay
    );

    let mut other = os_release(&e.key, 5);
    other.endpoint_id = "hifive-01".into();
    let other = other.seal(&e.key);
    assert_eq!(
        e.ep.verify_remote_command(&other).unwrap_err().code,
        MismatchCode::WrongEndpoint
    );

    let mut expired = os_release(&e.key, 6);
    expired.grant.expiry_ms = 0;
    let expired = expired.seal(&e.key);
    assert_eq!(
        e.ep.verify_remote_command(&expired).unwrap_err().code,
        MismatchCode::Expired
    );

    let mut broad = os_release(&e.key, 7);
    broad.command_spec.obj = ObjectRef::path("/etc/shadow");
    let broad = broad.seal(&e.key);
    assert_eq!(
        e.ep.verify_remote_command(&broad).unwrap_err().code,
        MismatchCode::ObjectMismatch
    );

    assert_eq!(e.ep.executed(), 0);
}

#[test]
fn channel_seq_is_durable() {
    let e = env(VerificationProfile::FastVerify, 0);
    e.ep.execute_and_return(&os_release(&e.key, 3));
    let kr = EndpointKeyring::load(&e.dir.path().join("pi-01.keyring.json")).unwrap();
    assert_eq!(kr.last_channel_seq, 3);
    let restarted = RemoteEndpoint::from_config(&EndpointConfig {
        endpoint_id: "pi-01".into(),
        keyring_path: e.dir.path().join("pi-01.keyring.json"),
        fixture_root: e.dir.path().join("pi-01"),
        profile: VerificationProfile::FastVerify,
        verify_delay_ms: Some(0),
        allow_direct: false,
    })
    .unwrap();
    assert_eq!(
        restarted
            .verify_remote_command(&os_release(&e.key, 3))
            .unwrap_err()
            .code,
        MismatchCode::ChannelReplay
    );
}

#[test]
fn keyring_identity_must_match() {
    let e = env(VerificationProfile::FastVerify, 0);
    let err = RemoteEndpoint::from_config(&EndpointConfig {
        endpoint_id: "hifive-01".into(),
        keyring_path: e.dir.path().join("pi-01.keyring.json"),
        fixture_root: e.dir.path().join("pi-01"),
        profile: VerificationProfile::SlowSetup,
        verify_delay_ms: None,
        allow_direct: false,
    })
    .unwrap_err();
    assert!(matches!(err, EndpointError::KeyringIdentity { .. }));
}

#[test]
fn profiles_differ_only_in_delay() {
    assert!(VerificationProfile::SlowSetup.default_delay() > VerificationProfile::FastVerify.default_delay());
    assert_eq!(
        "slow-setup".parse::<VerificationProfile>(),
        Ok(VerificationProfile::SlowSetup)
    );
    let slow = StubBackend::new(VerificationProfile::SlowSetup);
    let key = ChannelKey::generate();
    let started = std::time::Instant::now();
    assert!(slow.verify_mac(&key, b"m", &key.mac_hex(b"m")));
    assert!(started.elapsed() >= Duration::from_millis(80));
}

#[test]
fn served_over_frames_counts_received_bytes() {
    let e = env(VerificationProfile::FastVerify, 0);
    let ep = Arc::new(e.ep);
    let server = ep.serve("127.0.0.1:0").unwrap();
    let mut client = EndpointClient::connect(server.local_addr(), Duration::from_secs(5)).unwrap();
    assert_eq!(ep.received_bytes(), 0);
    let report = client.send_envelope(&os_release(&e.key, 1)).unwrap();
    assert_eq!(report.outcome.status, OutcomeStatus::Completed);
    assert!(ep.received_bytes() > 0);
    assert_eq!(ep.received_frames(), 1);

    let garbage = client.send_raw_envelope(serde_json::json!({"channel_seq": 9})).unwrap();
    assert_eq!(garbage.outcome.mismatch, Some(MismatchCode::Malformed));
    let direct = client
        .send_direct(&CommandSpec {
            act: Action::Read,
            obj: ObjectRef::path("/etc/os-release"),
            content: None,
        })
        .unwrap();
    assert_eq!(direct.status, OutcomeStatus::Rejected);
}
