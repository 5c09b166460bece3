//! HTTP console API: pending tickets, confirmation, evidence browsing and a
//! server-sent event stream.
//!
//! The stream resumes from the evidence counter given in `Last-Event-ID` or
//! `?after=`: it first sends a `snapshot` of pending tickets, then every
//! evidence record past the counter, then live events.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio_stream::wrappers::errors::BroadcastStreamRecvError;
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::{Stream, StreamExt};

use super::{ConfirmationTicket, EvidenceRecord, HumanDecision, PlaneError, PlaneEvent, TrustedPlane};

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ConfirmBody {
    pub ticket_id: String,
    pub decision: HumanDecision,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ConfirmResult {
    pub ticket: ConfirmationTicket,
    pub grant_issued: bool,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ApiError {
    pub code: crate::protocol::PlaneErrorCode,
    pub message: String,
}

#[derive(Debug, Default, Deserialize)]
pub struct AfterQuery {
    pub after: Option<u64>,
}

pub fn router(plane: Arc<TrustedPlane>) -> Router {
    Router::new()
        .route("/api/pending", get(pending))
        .route("/api/confirm", post(confirm))
        .route("/api/evidence", get(evidence))
        .route("/api/evidence/verify", get(verify))
        .route("/api/events", get(events))
        .with_state(plane)
}

/// Serves the console until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, plane: Arc<TrustedPlane>) -> std::io::Result<()> {
    axum::serve(listener, router(plane)).await
}

fn error_response(e: PlaneError) -> Response {
    let status = match e {
        PlaneError::UnknownTicket(_) => StatusCode::NOT_FOUND,
        PlaneError::AlreadyResolved(_) => StatusCode::CONFLICT,
        PlaneError::TicketExpired(_) => StatusCode::GONE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    let body = ApiError {
        code: e.code(),
        message: e.to_string(),
    };
    (status, Json(body)).into_response()
}

async fn pending(State(plane): State<Arc<TrustedPlane>>) -> Json<Vec<ConfirmationTicket>> {
    Json(plane.pending_tickets())
}

async fn confirm(State(plane): State<Arc<TrustedPlane>>, Json(body): Json<ConfirmBody>) -> Response {
    match plane
        .resolve_confirmation(&body.ticket_id, body.decision)
        .and_then(|g| plane.ticket(&body.ticket_id).map(|(t, _)| (t, g.is_some())))
    {
        Ok((ticket, grant_issued)) => Json(ConfirmResult { ticket, grant_issued }).into_response(),
        Err(e) => error_response(e),
    }
}

async fn evidence(State(plane): State<Arc<TrustedPlane>>, Query(q): Query<AfterQuery>) -> Json<Vec<EvidenceRecord>> {
    Json(plane.evidence_after(q.after.unwrap_or(0)))
}

async fn verify(State(plane): State<Arc<TrustedPlane>>) -> Json<super::VerificationReport> {
    Json(plane.verify())
}

fn evidence_event(record: &EvidenceRecord) -> Event {
    Event::default()
        .event("evidence")
        .id(record.ts.counter.to_string())
        .json_data(record)
        .expect("records serialize")
}

async fn events(
    State(plane): State<Arc<TrustedPlane>>,
    headers: HeaderMap,
    Query(q): Query<AfterQuery>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|s| s.parse().ok())
        .or(q.after)
        .unwrap_or(0);
    // Subscribe before reading the backlog so nothing falls in between.
    let live = BroadcastStream::new(plane.subscribe());
    let backlog = plane.evidence_after(after);
    let last = backlog.last().map(|r| r.ts.counter).unwrap_or(after);

    let mut head = vec![Event::default()
        .event("snapshot")
        .json_data(plane.pending_tickets())
        .expect("tickets serialize")];
    head.extend(backlog.iter().map(evidence_event));

    let live = live.filter_map(move |item| match item {
        Ok(PlaneEvent::Evidence { record }) if record.ts.counter > last => Some(evidence_event(&record)),
        Ok(PlaneEvent::Evidence { .. }) => None,
        Ok(PlaneEvent::Ticket { ticket }) => Some(
            Event::default()
                .event("ticket")
                .json_data(&ticket)
                .expect("tickets serialize"),
        ),
        Err(BroadcastStreamRecvError::Lagged(n)) => Some(Event::default().event("lagged").data(n.to_string())),
    });
    let stream = tokio_stream::iter(head).chain(live).map(Ok);
    Sse::new(stream).keep_alive(KeepAlive::default())
}
