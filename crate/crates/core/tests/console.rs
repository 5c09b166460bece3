use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use opgate_core::crypto::ChannelKey;
use opgate_core::protocol::PlaneResponse;
use opgate_core::request_plane::{ScopeSpec, SessionState};
use opgate_core::risk_model::{Action, ContextDescriptor, ObjectRef, Origin, Policy};
use opgate_core::trusted_plane::{console, ConfirmationTicket, EvidenceRecord, PlaneConfig, TrustedPlane};
use serde_json::{json, Value};
use tower::ServiceExt;

fn confirmable_plane() -> Arc<TrustedPlane> {
    let policy = Policy::default()
        .with(|c| c.decisions.mandatory_deny.object_classes.clear())
        .unwrap();
    Arc::new(TrustedPlane::new(PlaneConfig::new(policy, ChannelKey::generate())).unwrap())
}

/// Submits a browser-originated write to /etc/passwd, which needs a human.
fn pending_ticket(p: &Arc<TrustedPlane>) -> ConfirmationTicket {
    let mut t = Arc::clone(p);
    let mut s = SessionState::open(&mut t, "agent").unwrap();
    let ctx = ContextDescriptor {
        origin: Origin::Browser,
        task_consistent: false,
        user_present: true,
        cross_boundary: false,
        chained: false,
        network_payload: false,
    };
    let req = s
        .build_request(
            Action::Write,
            ObjectRef::path("/etc/passwd").with_payload(b"x"),
            ScopeSpec::paths(["/etc"]),
            ctx,
        )
        .unwrap();
    match p.dispatch(&s.submission(&req)) {
        PlaneResponse::ConfirmationPending { ticket } => ticket,
        other => panic!("{other:?}"),
    }
}

async fn call(p: &Arc<TrustedPlane>, req: Request<Body>) -> (StatusCode, Value) {
    let resp = console::router(Arc::clone(p)).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn confirm(ticket_id: &str, decision: &str) -> Request<Body> {
    Request::post("/api/confirm")
        .header("content-type", "application/json")
        .body(Body::from(
            json!({"ticket_id": ticket_id, "decision": decision}).to_string(),
        ))
        .unwrap()
}

#[tokio::test]
async fn pending_then_confirm_then_conflict() {
    let p = confirmable_plane();
    let ticket = pending_ticket(&p);

    let (status, pending) = call(&p, get("/api/pending")).await;
    assert_eq!(status, StatusCode::OK);
    let listed: Vec<ConfirmationTicket> = serde_json::from_value(pending).unwrap();
    assert_eq!(listed, vec![ticket.clone()]);

    let (status, body) = call(&p, confirm(&ticket.ticket_id, "approve")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["grant_issued"], true);
    assert_eq!(body["ticket"]["ticket_id"], ticket.ticket_id.as_str());
    assert_eq!(p.issued_grants().len(), 1);

    let (_, pending) = call(&p, get("/api/pending")).await;
    assert_eq!(pending, json!([]));

    let (status, body) = call(&p, confirm(&ticket.ticket_id, "deny")).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "already_resolved");
    let (status, _) = call(&p, confirm("no-such-ticket", "approve")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn denied_confirmation_issues_no_grant() {
    let p = confirmable_plane();
    let ticket = pending_ticket(&p);
    let (status, body) = call(&p, confirm(&ticket.ticket_id, "deny")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["grant_issued"], false);
    assert!(p.issued_grants().is_empty());
}

#[tokio::test]
async fn evidence_after_and_verify() {
    let p = confirmable_plane();
    pending_ticket(&p);
    pending_ticket(&p);
    let (status, all) = call(&p, get("/api/evidence")).await;
    assert_eq!(status, StatusCode::OK);
    let all: Vec<EvidenceRecord> = serde_json::from_value(all).unwrap();
    assert!(all.len() >= 2);
    assert!(all.iter().enumerate().all(|(i, r)| r.ts.counter == i as u64 + 1));

    let (_, tail) = call(&p, get("/api/evidence?after=1")).await;
    let tail: Vec<EvidenceRecord> = serde_json::from_value(tail).unwrap();
    assert_eq!(tail, all[1..]);
    let (_, none) = call(&p, get(&format!("/api/evidence?after={}", all.len()))).await;
    assert_eq!(none, json!([]));

    let (status, verdict) = call(&p, get("/api/evidence/verify")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(verdict["valid"], true);
    assert_eq!(verdict["records"], all.len());
}

/// Reads SSE frames until `n` events have been parsed.
async fn read_events(body: &mut Body, n: usize) -> Vec<(String, Option<String>, String)> {
    let mut buf = String::new();
    let mut out = Vec::new();
    while out.len() < n {
        let frame = tokio::time::timeout(Duration::from_secs(5), body.frame())
            .await
            .expect("event within 5s")
            .expect("stream open")
            .unwrap();
        if let Ok(data) = frame.into_data() {
            buf.push_str(std::str::from_utf8(&data).unwrap());
        }
        while let Some(end) = buf.find("\n\n") {
            let block: String = buf.drain(..end + 2).collect();
            let (mut event, mut id, mut data) = (String::new(), None, String::new());
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    event = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("id:") {
                    id = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            if !event.is_empty() {
                out.push((event, id, data));
            }
        }
    }
    out
}

#[tokio::test]
async fn event_stream_replays_backlog_then_goes_live() {
    let p = confirmable_plane();
    let first = pending_ticket(&p);
    let backlog = p.evidence_after(0).len() as u64;

    let resp = console::router(Arc::clone(&p))
        .oneshot(
            Request::get("/api/events")
                .header("last-event-id", "0")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();

    let head = read_events(&mut body, 1 + backlog as usize).await;
    assert_eq!(head[0].0, "snapshot");
    let snapshot: Vec<ConfirmationTicket> = serde_json::from_str(&head[0].2).unwrap();
    assert_eq!(snapshot, vec![first]);
    let ids: Vec<_> = head[1..]
        .iter()
        .map(|(e, id, _)| (e.as_str(), id.clone().unwrap()))
        .collect();
    let expected: Vec<_> = (1..=backlog).map(|c| ("evidence", c.to_string())).collect();
    assert_eq!(ids, expected);

    let p2 = Arc::clone(&p);
    let second = tokio::task::spawn_blocking(move || pending_ticket(&p2)).await.unwrap();
    let added = p.evidence_after(backlog).len();
    let live = read_events(&mut body, 1 + added).await;
    let kinds: Vec<_> = live.iter().map(|e| e.0.as_str()).collect();
    assert!(kinds.contains(&"ticket"), "{kinds:?}");
    let ticket = live.iter().find(|e| e.0 == "ticket").unwrap();
    assert_eq!(
        serde_json::from_str::<ConfirmationTicket>(&ticket.2).unwrap().ticket_id,
        second.ticket_id
    );
    let live_ids: Vec<u64> = live
        .iter()
        .filter_map(|e| e.1.as_ref())
        .map(|s| s.parse().unwrap())
        .collect();
    assert_eq!(live_ids, (backlog + 1..=backlog + added as u64).collect::<Vec<_>>());
}

#[tokio::test]
async fn event_stream_resumes_after_given_counter() {
    let p = confirmable_plane();
    pending_ticket(&p);
    pending_ticket(&p);
    let total = p.evidence_after(0).len();
    let resp = console::router(Arc::clone(&p))
        .oneshot(get("/api/events?after=1"))
        .await
        .unwrap();
    let mut body = resp.into_body();
    let events = read_events(&mut body, total).await;
    assert_eq!(events[0].0, "snapshot");
    let ids: Vec<u64> = events[1..]
        .iter()
        .map(|e| e.1.as_ref().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ids, (2..=total as u64).collect::<Vec<_>>());
}
