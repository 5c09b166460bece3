use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use opgate_core::crypto::ChannelKey;
use opgate_core::protocol::PlaneResponse;
use opgate_core::request_plane::{ScopeSpec, SessionState};
use opgate_core::risk_model::{assess, Action, ContextDescriptor, ObjectRef, OperationInstance, Policy};
use opgate_core::trusted_plane::{
    verify_lines, EvidenceEvent, EvidenceLog, PlaneConfig, RecordDraft, ResultStatus, TrustedPlane,
};

fn risk(c: &mut Criterion) {
    let p = Policy::default();
    let inst = OperationInstance::from_parts(
        "s",
        Action::Write,
        ObjectRef::path("/etc/ssh/sshd_config"),
        ContextDescriptor::remote(),
        &p,
    )
    .unwrap();
    c.bench_function("assess", |b| b.iter(|| assess(black_box(&inst), &p).unwrap()));
}

fn submit(c: &mut Criterion) {
    let plane = Arc::new(TrustedPlane::new(PlaneConfig::new(Policy::default(), ChannelKey::generate())).unwrap());
    let mut t = Arc::clone(&plane);
    let mut session = SessionState::open(&mut t, "bench").unwrap();
    c.bench_function("plane_submit_grant", |b| {
        b.iter(|| {
            let req = session
                .build_request(
                    Action::Read,
                    ObjectRef::path("/workspace/README.rst"),
                    ScopeSpec::paths(["/workspace"]),
                    ContextDescriptor::local(),
                )
                .unwrap();
            let resp = plane.dispatch(&session.submission(&req));
            assert!(matches!(resp, PlaneResponse::Granted { .. }));
        })
    });
}

fn evidence(c: &mut Criterion) {
    let draft = |seq, res, event| RecordDraft {
        sid: "s".into(),
        act: Some(Action::Read),
        obj: Some(ObjectRef::path("/workspace/README.rst")),
        scope: None,
        level: None,
        seq,
        dec: None,
        res,
        event,
        request_digest: None,
        grant_id: None,
        note: None,
    };
    c.bench_function("evidence_append", |b| {
        b.iter_batched(
            EvidenceLog::in_memory,
            |mut log| {
                log.append(
                    draft(1, ResultStatus::Pending, EvidenceEvent::Decision),
                    "2026-01-01T00:00:00.000Z".into(),
                )
                .unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    let mut log = EvidenceLog::in_memory();
    for seq in 1..=500 {
        log.append(
            draft(seq, ResultStatus::Pending, EvidenceEvent::Decision),
            "2026-01-01T00:00:00.000Z".into(),
        )
        .unwrap();
        log.append(
            draft(seq, ResultStatus::Completed, EvidenceEvent::Completion),
            "2026-01-01T00:00:00.000Z".into(),
        )
        .unwrap();
    }
    let lines: Vec<String> = log
        .records()
        .iter()
        .map(|r| String::from_utf8(r.to_line()).unwrap())
        .collect();
    let head = log.head();
    c.bench_function("verify_chain_1000", |b| {
        b.iter(|| assert!(verify_lines(black_box(&lines), Some(&head)).valid))
    });
}

criterion_group!(benches, risk, submit, evidence);
criterion_main!(benches);
