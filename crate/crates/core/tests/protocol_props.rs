use std::sync::Arc;

use opgate_core::crypto::ChannelKey;
use opgate_core::protocol::{PlaneErrorCode, PlaneResponse};
use opgate_core::remote_endpoint::{CommandSpec, RemoteCommandEnvelope};
use opgate_core::request_plane::{canonical_encode, AssessedLevel, ScopeSpec, SessionState, TrustedOperationRequest};
use opgate_core::risk_model::{Action, ContextDescriptor, ObjectRef, Origin, Policy, SecurityLevel};
use opgate_core::trusted_plane::{
    verify_lines, AuthorizationGrant, ChainHead, EvidenceEvent, EvidenceLog, GrantDecision, PlaneConfig, RecordDraft,
    ResultStatus, TrustedPlane,
};
use proptest::prelude::*;

fn segment() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("workspace".to_string()),
        Just("etc".to_string()),
        Just("docs".to_string()),
        "[a-z0-9._-]{1,8}",
        "[a-zA-Z \"\\\\é/]{0,6}",
    ]
}

fn path() -> impl Strategy<Value = String> {
    proptest::collection::vec(segment(), 0..4).prop_map(|s| format!("/{}", s.join("/")))
}

fn object() -> impl Strategy<Value = ObjectRef> {
    (
        path(),
        proptest::option::of(path()),
        proptest::collection::vec("[a-z\\-|* ]{0,6}", 0..4),
        proptest::option::of("[0-9a-f]{4}"),
    )
        .prop_map(|(target, destination, argv, payload_sha256)| ObjectRef {
            target,
            destination,
            argv,
            payload_sha256,
        })
}

fn context() -> impl Strategy<Value = ContextDescriptor> {
    (0usize..4, any::<[bool; 5]>()).prop_map(|(o, b)| ContextDescriptor {
        origin: [Origin::Local, Origin::Remote, Origin::Browser, Origin::Plugin][o],
        task_consistent: b[0],
        user_present: b[1],
        cross_boundary: b[2],
        chained: b[3],
        network_payload: b[4],
    })
}

fn request() -> impl Strategy<Value = TrustedOperationRequest> {
    (
        "[a-f0-9-]{1,12}",
        0usize..Action::ALL.len(),
        object(),
        proptest::collection::vec(path(), 0..3),
        proptest::collection::vec("[a-z {}.]{0,8}", 0..2),
        proptest::option::of("[a-z0-9-]{0,6}"),
        context(),
        proptest::option::of(0usize..4),
        any::<u64>(),
        any::<u64>(),
    )
        .prop_map(
            |(sid, a, obj, paths, commands, endpoint, ctx, level, seq, ttl)| TrustedOperationRequest {
                sid,
                act: Action::ALL[a],
                obj,
                scope: ScopeSpec {
                    paths,
                    commands,
                    endpoint,
                },
                ctx,
                level: level.map_or(AssessedLevel::Unassessed, |l| {
                    AssessedLevel::Assessed(SecurityLevel::ALL[l])
                }),
                seq,
                ttl,
            },
        )
}

/// A second request that is either identical or differs in one field.
fn near(r: TrustedOperationRequest) -> impl Strategy<Value = (TrustedOperationRequest, TrustedOperationRequest)> {
    (Just(r), 0usize..8, request()).prop_map(|(a, which, other)| {
        let mut b = a.clone();
        match which {
            0 => b.sid = other.sid,
            1 => b.act = other.act,
            2 => b.obj = other.obj,
            3 => b.scope = other.scope,
            4 => b.ctx = other.ctx,
            5 => b.seq = other.seq,
            6 => b.ttl = other.ttl,
            _ => {}
        }
        (a, b)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn canonical_encoding_is_injective((a, b) in request().prop_flat_map(near)) {
        let (ea, eb) = (canonical_encode(&a), canonical_encode(&b));
        prop_assert_eq!(ea == eb, a == b);
        prop_assert_eq!(a.digest() == b.digest(), a == b);
        let back: TrustedOperationRequest = serde_json::from_slice(&ea).unwrap();
        prop_assert_eq!(back, a);
    }
}

fn plane() -> Arc<TrustedPlane> {
    Arc::new(TrustedPlane::new(PlaneConfig::new(Policy::default(), ChannelKey::generate())).unwrap())
}

fn benign(session: &mut SessionState) -> TrustedOperationRequest {
    session
        .build_request(
            Action::Read,
            ObjectRef::path("/workspace/README.rst"),
            ScopeSpec::paths(["/workspace"]),
            ContextDescriptor::local(),
        )
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plane_accepts_a_seq_iff_it_exceeds_every_accepted_seq(seqs in proptest::collection::vec(1u64..20, 1..16)) {
        let p = plane();
        let mut t = Arc::clone(&p);
        let mut session = SessionState::open(&mut t, "agent").unwrap();
        let mut high = 0;
        for s in seqs {
            let mut req = benign(&mut session);
            req.seq = s;
            let resp = p.dispatch(&session.submission(&req));
            if s > high {
                prop_assert!(matches!(resp, PlaneResponse::Granted { .. }), "seq {} after {}: {:?}", s, high, resp);
                high = s;
            } else {
                prop_assert_eq!(resp.error_code(), Some(PlaneErrorCode::StaleSeq));
            }
        }
        prop_assert!(p.verify().valid);
    }

    #[test]
    fn session_seq_is_strictly_increasing(n in 1usize..40) {
        let p = plane();
        let mut t = Arc::clone(&p);
        let mut session = SessionState::open(&mut t, "agent").unwrap();
        let seqs: Vec<u64> = (0..n).map(|_| benign(&mut session).seq).collect();
        prop_assert_eq!(seqs, (1..=n as u64).collect::<Vec<_>>());
    }
}

fn sample_grant(key: &ChannelKey) -> AuthorizationGrant {
    AuthorizationGrant {
        v: 1,
        grant_id: "g-1".into(),
        request_digest: "ab".repeat(32),
        sid: "s-1".into(),
        seq: 3,
        act: Action::Write,
        obj: ObjectRef::path("/workspace/out/summary.txt").with_payload(b"hello"),
        decision: GrantDecision::Ree,
        level: SecurityLevel::L0,
        approved_scope: ScopeSpec::paths(["/workspace/out"]),
        expiry_ms: 1_700_000_000_000,
        nonce: "0123456789abcdef".into(),
        mac: String::new(),
    }
    .sign(key)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn any_parseable_byte_change_breaks_the_grant_mac(i in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let key = ChannelKey::from_bytes([7; 32]);
        let g = sample_grant(&key);
        let mut bytes = serde_json::to_vec(&g).unwrap();
        let at = i.index(bytes.len());
        prop_assume!(bytes[at] != byte);
        bytes[at] = byte;
        if let Ok(forged) = serde_json::from_slice::<AuthorizationGrant>(&bytes) {
            prop_assert!(forged == g || !forged.verify(&key));
        }
    }

    #[test]
    fn any_parseable_byte_change_breaks_the_envelope_mac(i in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let key = ChannelKey::from_bytes([9; 32]);
        let env = RemoteCommandEnvelope {
            v: 1,
            endpoint_id: "pi-01".into(),
            grant: sample_grant(&ChannelKey::from_bytes([7; 32])),
            command_spec: CommandSpec {
                act: Action::Read,
                obj: ObjectRef::path("/etc/os-release"),
                content: None,
            },
            channel_seq: 4,
            issued_at_ms: 1_700_000_000_000,
            envelope_mac: String::new(),
        }
        .seal(&key);
        let mut bytes = serde_json::to_vec(&env).unwrap();
        let at = i.index(bytes.len());
        prop_assume!(bytes[at] != byte);
        bytes[at] = byte;
        if let Ok(forged) = serde_json::from_slice::<RemoteCommandEnvelope>(&bytes) {
            let ok = key.verify_hex(&forged.mac_input(), &forged.envelope_mac);
            prop_assert!(forged == env || !ok);
        }
    }
}

fn build_log(n: usize) -> (Vec<String>, ChainHead) {
    let mut log = EvidenceLog::in_memory();
    for i in 0..n {
        let seq = i as u64 / 2 + 1;
        let decision = i % 2 == 0;
        log.append(
            RecordDraft {
                sid: "s".into(),
                act: Some(Action::Read),
                obj: Some(ObjectRef::path("/workspace/README.rst")),
                scope: None,
                level: Some(SecurityLevel::L0),
                seq,
                dec: decision.then_some(opgate_core::risk_model::EnforcementDecision::Ree),
                res: if decision {
                    ResultStatus::Pending
                } else {
                    ResultStatus::Completed
                },
                event: if decision {
                    EvidenceEvent::Decision
                } else {
                    EvidenceEvent::Completion
                },
                request_digest: None,
                grant_id: Some(format!("g{seq}")),
                note: None,
            },
            format!("2026-01-01T00:00:{:02}.000Z", i % 60),
        )
        .unwrap();
    }
    let lines = log
        .records()
        .iter()
        .map(|r| String::from_utf8(r.to_line()).unwrap())
        .collect();
    (lines, log.head())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn single_record_mutation_breaks_at_that_index(n in 1usize..30, i in any::<prop::sample::Index>(), field in 0usize..4) {
        let (mut lines, head) = build_log(n);
        prop_assert!(verify_lines(&lines, Some(&head)).valid);
        let at = i.index(n);
        let mut v: serde_json::Value = serde_json::from_str(&lines[at]).unwrap();
        match field {
            0 => v["res"] = "failed".into(),
            1 => v["seq"] = (v["seq"].as_u64().unwrap() + 100).into(),
            2 => v["note"] = "edited".into(),
            _ => v["ts"]["wall"] = "1999-01-01T00:00:00.000Z".into(),
        }
        // Keep the line canonical so only the hash can catch the edit.
        lines[at] = String::from_utf8(opgate_core::canonical::value_to_canonical_bytes(&v).unwrap()).unwrap();
        let r = verify_lines(&lines, Some(&head));
        prop_assert!(!r.valid);
        prop_assert_eq!(r.first_break, Some(at as u64));
    }

    #[test]
    fn single_record_deletion_breaks_at_that_index(n in 1usize..30, i in any::<prop::sample::Index>()) {
        let (mut lines, head) = build_log(n);
        let at = i.index(n);
        lines.remove(at);
        let r = verify_lines(&lines, Some(&head));
        prop_assert!(!r.valid);
        prop_assert_eq!(r.first_break, Some(at as u64));
    }
}
