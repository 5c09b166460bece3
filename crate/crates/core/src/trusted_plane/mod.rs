//! The trusted operation plane.
//!
//! Validates requests against their session, classifies them with the risk
//! model, issues MAC-bound grants, runs confirmation tickets and keeps the
//! evidence chain. All state sits behind one lock, so per-session sequence
//! checks and chain appends are serialized.

mod confirm;
pub mod console;
mod evidence;
mod grant;

pub use confirm::{ConfirmationTicket, HumanDecision, TicketState};
pub use evidence::{
    read_lines, verify_chain, verify_lines, ChainHead, EvidenceError, EvidenceEvent, EvidenceLog, EvidenceRecord,
    RecordDraft, ResultStatus, Timestamp, VerificationReport, GENESIS_HASH,
};
pub use grant::{AuthorizationGrant, GrantDecision, GRANT_VERSION};

use std::collections::{BTreeMap, HashMap};
use std::net::ToSocketAddrs;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;
use serde_json::Value;
use tokio::sync::broadcast;

use crate::canonical::value_to_canonical_bytes;
use crate::clock::{rfc3339_ms, Clock, SystemClock};
use crate::constrained_executor::{ExecutionOutcome, ExecutorReport, OutcomeStatus};
use crate::crypto::{random_nonce_hex, ChannelKey};
use crate::logical_path;
use crate::protocol::{PlaneErrorCode, PlaneRequest, PlaneResponse, PlaneTransport, TransportError};
use crate::remote_endpoint::{CommandSpec, EndpointReport, RemoteCommandEnvelope, ENVELOPE_VERSION};
use crate::request_plane::{AssessedLevel, ScopeSpec, TrustedOperationRequest};
use crate::risk_model::{assess, Assessment, EnforcementDecision, OperationInstance, Policy, SecurityLevel};
use crate::wire::{FrameServer, WireError};

pub const DEFAULT_TICKET_TTL_MS: u64 = 120_000;
pub const DEFAULT_COMPLETION_GRACE_MS: u64 = 2_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PlaneError {
    #[error("stale sequence number {seq} for session {sid} (last accepted {last})")]
    StaleSeq { sid: String, seq: u64, last: u64 },
    #[error("request ttl has expired")]
    ExpiredTtl,
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error("request MAC does not verify under the session key")]
    BadRequestMac,
    #[error("unknown grant `{0}`")]
    UnknownGrant(String),
    #[error("evidence for grant `{0}` is already closed")]
    AlreadyClosed(String),
    #[error("ticket `{0}` is already resolved")]
    AlreadyResolved(String),
    #[error("ticket `{0}` has expired")]
    TicketExpired(String),
    #[error("unknown ticket `{0}`")]
    UnknownTicket(String),
    #[error("unknown endpoint `{0}`")]
    UnknownEndpoint(String),
    #[error("scope mismatch: {0}")]
    ScopeMismatch(String),
    #[error("grant `{0}` was already dispatched")]
    AlreadyDispatched(String),
    #[error("report rejected: {0}")]
    BadReport(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl PlaneError {
    pub fn code(&self) -> PlaneErrorCode {
        match self {
            PlaneError::StaleSeq { .. } => PlaneErrorCode::StaleSeq,
            PlaneError::ExpiredTtl => PlaneErrorCode::ExpiredTtl,
            PlaneError::UnknownSession(_) => PlaneErrorCode::UnknownSession,
            PlaneError::MalformedRequest(_) => PlaneErrorCode::MalformedRequest,
            PlaneError::BadRequestMac => PlaneErrorCode::BadRequestMac,
            PlaneError::UnknownGrant(_) => PlaneErrorCode::UnknownGrant,
            PlaneError::AlreadyClosed(_) => PlaneErrorCode::AlreadyClosed,
            PlaneError::AlreadyResolved(_) => PlaneErrorCode::AlreadyResolved,
            PlaneError::TicketExpired(_) => PlaneErrorCode::TicketExpired,
            PlaneError::UnknownTicket(_) => PlaneErrorCode::UnknownTicket,
            PlaneError::UnknownEndpoint(_) => PlaneErrorCode::UnknownEndpoint,
            PlaneError::ScopeMismatch(_) => PlaneErrorCode::ScopeMismatch,
            PlaneError::AlreadyDispatched(_) => PlaneErrorCode::AlreadyDispatched,
            PlaneError::BadReport(_) => PlaneErrorCode::BadReport,
            PlaneError::Internal(_) => PlaneErrorCode::Internal,
        }
    }

    fn into_response(self) -> PlaneResponse {
        PlaneResponse::Error {
            code: self.code(),
            message: self.to_string(),
        }
    }
}

impl From<EvidenceError> for PlaneError {
    fn from(e: EvidenceError) -> Self {
        PlaneError::Internal(e.to_string())
    }
}

/// Result of a successful intake.
#[derive(Debug, Clone, PartialEq)]
pub enum Submission {
    Granted(AuthorizationGrant),
    Pending(ConfirmationTicket),
    Denied { request_digest: String, reason: String },
}

/// Pushed to console subscribers.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlaneEvent {
    Evidence { record: Box<EvidenceRecord> },
    Ticket { ticket: ConfirmationTicket },
}

impl PlaneEvent {
    pub fn counter(&self) -> Option<u64> {
        match self {
            PlaneEvent::Evidence { record } => Some(record.ts.counter),
            PlaneEvent::Ticket { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlaneConfig {
    pub policy: Policy,
    pub executor_key: ChannelKey,
    pub endpoints: BTreeMap<String, ChannelKey>,
    pub evidence_path: Option<PathBuf>,
    pub ticket_ttl_ms: u64,
    /// How long after grant expiry the plane waits for a result before
    /// closing the lifecycle as failed.
    pub completion_grace_ms: u64,
    pub clock: Arc<dyn Clock>,
}

impl PlaneConfig {
    pub fn new(policy: Policy, executor_key: ChannelKey) -> Self {
        Self {
            policy,
            executor_key,
            endpoints: BTreeMap::new(),
            evidence_path: None,
            ticket_ttl_ms: DEFAULT_TICKET_TTL_MS,
            completion_grace_ms: DEFAULT_COMPLETION_GRACE_MS,
            clock: Arc::new(SystemClock),
        }
    }
}

#[derive(Debug)]
struct Session {
    subject: String,
    key: ChannelKey,
    last_seq: u64,
}

#[derive(Debug)]
struct GrantEntry {
    grant: AuthorizationGrant,
    closed: bool,
    /// Endpoint and channel_seq once sealed for remote execution.
    dispatch: Option<(String, u64)>,
}

#[derive(Debug)]
struct TicketEntry {
    ticket: ConfirmationTicket,
    request: TrustedOperationRequest,
    approved_scope: ScopeSpec,
    ttl_ms: u64,
    grant: Option<AuthorizationGrant>,
}

#[derive(Debug)]
struct PlaneState {
    sessions: HashMap<String, Session>,
    grants: HashMap<String, GrantEntry>,
    tickets: HashMap<String, TicketEntry>,
    channel_seq: HashMap<String, u64>,
    evidence: EvidenceLog,
}

pub struct TrustedPlane {
    policy: Policy,
    executor_key: ChannelKey,
    endpoints: BTreeMap<String, ChannelKey>,
    ticket_ttl_ms: u64,
    completion_grace_ms: u64,
    clock: Arc<dyn Clock>,
    state: Mutex<PlaneState>,
    events: broadcast::Sender<PlaneEvent>,
}

impl std::fmt::Debug for TrustedPlane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrustedPlane")
            .field("policy", &self.policy.digest())
            .field("endpoints", &self.endpoints.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl TrustedPlane {
    pub fn new(config: PlaneConfig) -> Result<Self, PlaneError> {
        let evidence = match &config.evidence_path {
            Some(p) => EvidenceLog::create(p)?,
            None => EvidenceLog::in_memory(),
        };
        let (events, _) = broadcast::channel(4096);
        Ok(Self {
            policy: config.policy,
            executor_key: config.executor_key,
            endpoints: config.endpoints,
            ticket_ttl_ms: config.ticket_ttl_ms,
            completion_grace_ms: config.completion_grace_ms,
            clock: config.clock,
            state: Mutex::new(PlaneState {
                sessions: HashMap::new(),
                grants: HashMap::new(),
                tickets: HashMap::new(),
                channel_seq: HashMap::new(),
                evidence,
            }),
            events,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn subscribe(&self) -> broadcast::Receiver<PlaneEvent> {
        self.events.subscribe()
    }

    fn lock(&self) -> MutexGuard<'_, PlaneState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn append(&self, st: &mut PlaneState, draft: RecordDraft) -> Result<EvidenceRecord, PlaneError> {
        let rec = st.evidence.append(draft, rfc3339_ms(self.clock.now_ms()))?;
        let _ = self.events.send(PlaneEvent::Evidence {
            record: Box::new(rec.clone()),
        });
        Ok(rec)
    }

    fn publish_ticket(&self, ticket: &ConfirmationTicket) {
        let _ = self.events.send(PlaneEvent::Ticket { ticket: ticket.clone() });
    }

    /// Creates a session and returns `(sid, session key)`.
    pub fn open_session(&self, subject: &str) -> Result<(String, ChannelKey), PlaneError> {
        if subject.trim().is_empty() {
            return Err(PlaneError::MalformedRequest("empty subject".into()));
        }
        let sid = format!("s-{}", uuid::Uuid::new_v4());
        let key = ChannelKey::generate();
        self.lock().sessions.insert(
            sid.clone(),
            Session {
                subject: subject.to_string(),
                key: key.clone(),
                last_seq: 0,
            },
        );
        Ok((sid, key))
    }

    /// Intake of one submitted request.
    pub fn handle_request(&self, request: &Value, mac: &str) -> Result<Submission, PlaneError> {
        let mut st = self.lock();
        let now = self.clock.now_ms();

        let req = match serde_json::from_value::<TrustedOperationRequest>(request.clone()) {
            Ok(r) => r,
            Err(e) => {
                let err = PlaneError::MalformedRequest(e.to_string());
                self.reject_raw(&mut st, request, &err)?;
                return Err(err);
            }
        };
        let Some(session) = st.sessions.get(&req.sid) else {
            let err = PlaneError::UnknownSession(req.sid.clone());
            self.reject(&mut st, &req, None, &err)?;
            return Err(err);
        };
        let mac_ok = value_to_canonical_bytes(request)
            .map(|b| session.key.verify_hex(&b, mac))
            .unwrap_or(false);
        let subject = session.subject.clone();
        let last_seq = session.last_seq;
        if !mac_ok {
            let err = PlaneError::BadRequestMac;
            self.reject(&mut st, &req, None, &err)?;
            return Err(err);
        }
        if let Err(e) = req.validate() {
            let err = PlaneError::MalformedRequest(e.to_string());
            self.reject(&mut st, &req, None, &err)?;
            return Err(err);
        }
        if req.level != AssessedLevel::Unassessed {
            let err = PlaneError::MalformedRequest("level is assigned by the plane".into());
            self.reject(&mut st, &req, None, &err)?;
            return Err(err);
        }
        if req.seq <= last_seq {
            let err = PlaneError::StaleSeq {
                sid: req.sid.clone(),
                seq: req.seq,
                last: last_seq,
            };
            self.reject(&mut st, &req, None, &err)?;
            return Err(err);
        }
        if let Some(s) = st.sessions.get_mut(&req.sid) {
            s.last_seq = req.seq;
        }
        if req.ttl == 0 {
            let err = PlaneError::ExpiredTtl;
            self.reject(&mut st, &req, None, &err)?;
            return Err(err);
        }
        let ttl_ms = req.ttl.min(self.policy.max_ttl_ms());

        let assessment = match OperationInstance::from_parts(subject, req.act, req.obj.clone(), req.ctx, &self.policy)
            .and_then(|inst| assess(&inst, &self.policy))
        {
            Ok(a) => a,
            Err(e) => {
                let err = PlaneError::MalformedRequest(e.to_string());
                self.reject(&mut st, &req, None, &err)?;
                return Err(err);
            }
        };
        let digest = req.digest();

        match assessment.decision {
            EnforcementDecision::Deny => {
                let reason = deny_reason(&req, &assessment);
                self.append(
                    &mut st,
                    decision_draft(&req, &assessment, &digest, ResultStatus::Denied, req.scope.clone())
                        .with_note(&reason),
                )?;
                Ok(Submission::Denied {
                    request_digest: digest,
                    reason,
                })
            }
            EnforcementDecision::UserConfirmation => {
                let scope = match approve_scope(&req, &self.policy, true) {
                    Ok(s) => s,
                    Err(msg) => {
                        let err = PlaneError::ScopeMismatch(msg);
                        self.reject(&mut st, &req, Some(&assessment), &err)?;
                        return Err(err);
                    }
                };
                let ticket = ConfirmationTicket {
                    ticket_id: format!("t-{}", uuid::Uuid::new_v4()),
                    request_digest: digest.clone(),
                    sid: req.sid.clone(),
                    seq: req.seq,
                    summary: summarize(&req, &assessment),
                    level: assessment.level,
                    created_at: rfc3339_ms(now),
                    created_at_ms: now,
                    expires_at_ms: now + self.ticket_ttl_ms as i64,
                    state: TicketState::Pending,
                };
                self.append(
                    &mut st,
                    decision_draft(&req, &assessment, &digest, ResultStatus::Pending, scope.clone())
                        .with_note(&format!("ticket {}", ticket.ticket_id)),
                )?;
                st.tickets.insert(
                    ticket.ticket_id.clone(),
                    TicketEntry {
                        ticket: ticket.clone(),
                        request: req,
                        approved_scope: scope,
                        ttl_ms,
                        grant: None,
                    },
                );
                self.publish_ticket(&ticket);
                Ok(Submission::Pending(ticket))
            }
            decision => {
                let scope = match approve_scope(&req, &self.policy, false) {
                    Ok(s) => s,
                    Err(msg) => {
                        let err = PlaneError::ScopeMismatch(msg);
                        self.reject(&mut st, &req, Some(&assessment), &err)?;
                        return Err(err);
                    }
                };
                let gd = GrantDecision::from_decision(decision).expect("granting decision");
                let grant = self.mint_grant(&req, &digest, gd, assessment.level, scope.clone(), now + ttl_ms as i64);
                self.append(
                    &mut st,
                    decision_draft(&req, &assessment, &digest, ResultStatus::Pending, scope.clone())
                        .with_grant(&grant.grant_id),
                )?;
                if decision == EnforcementDecision::IsolatedExecution {
                    self.append(
                        &mut st,
                        decision_draft(&req, &assessment, &digest, ResultStatus::Pending, scope)
                            .with_grant(&grant.grant_id)
                            .event(EvidenceEvent::Dispatch)
                            .with_note("isolated execution dispatch"),
                    )?;
                }
                st.grants.insert(
                    grant.grant_id.clone(),
                    GrantEntry {
                        grant: grant.clone(),
                        closed: false,
                        dispatch: None,
                    },
                );
                Ok(Submission::Granted(grant))
            }
        }
    }

    fn mint_grant(
        &self,
        req: &TrustedOperationRequest,
        digest: &str,
        decision: GrantDecision,
        level: SecurityLevel,
        approved_scope: ScopeSpec,
        expiry_ms: i64,
    ) -> AuthorizationGrant {
        AuthorizationGrant {
            v: GRANT_VERSION,
            grant_id: format!("g-{}", uuid::Uuid::new_v4()),
            request_digest: digest.to_string(),
            sid: req.sid.clone(),
            seq: req.seq,
            act: req.act,
            obj: req.obj.clone(),
            decision,
            level,
            approved_scope,
            expiry_ms,
            nonce: random_nonce_hex(),
            mac: String::new(),
        }
        .sign(&self.executor_key)
    }

    fn reject(
        &self,
        st: &mut PlaneState,
        req: &TrustedOperationRequest,
        assessment: Option<&Assessment>,
        err: &PlaneError,
    ) -> Result<(), PlaneError> {
        self.append(
            st,
            RecordDraft {
                sid: req.sid.clone(),
                act: Some(req.act),
                obj: Some(req.obj.clone()),
                scope: Some(req.scope.clone()),
                level: assessment.map(|a| a.level),
                seq: req.seq,
                dec: assessment.map(|a| a.decision),
                res: ResultStatus::Rejected,
                event: EvidenceEvent::Rejection,
                request_digest: Some(req.digest()),
                grant_id: None,
                note: Some(err.to_string()),
            },
        )?;
        Ok(())
    }

    fn reject_raw(&self, st: &mut PlaneState, raw: &Value, err: &PlaneError) -> Result<(), PlaneError> {
        self.append(
            st,
            RecordDraft {
                sid: raw.get("sid").and_then(Value::as_str).unwrap_or_default().to_string(),
                act: None,
                obj: None,
                scope: None,
                level: None,
                seq: raw.get("seq").and_then(Value::as_u64).unwrap_or(0),
                dec: None,
                res: ResultStatus::Rejected,
                event: EvidenceEvent::Rejection,
                request_digest: value_to_canonical_bytes(raw)
                    .ok()
                    .map(|b| crate::canonical::sha256_hex(&b)),
                grant_id: None,
                note: Some(err.to_string()),
            },
        )?;
        Ok(())
    }

    /// Applies a human decision to a pending ticket.
    pub fn resolve_confirmation(
        &self,
        ticket_id: &str,
        decision: HumanDecision,
    ) -> Result<Option<AuthorizationGrant>, PlaneError> {
        let mut st = self.lock();
        let now = self.clock.now_ms();
        let entry = st
            .tickets
            .get(ticket_id)
            .ok_or_else(|| PlaneError::UnknownTicket(ticket_id.to_string()))?;
        match entry.ticket.state {
            TicketState::Pending => {}
            TicketState::Expired => return Err(PlaneError::TicketExpired(ticket_id.to_string())),
            _ => return Err(PlaneError::AlreadyResolved(ticket_id.to_string())),
        }
        if now >= entry.ticket.expires_at_ms {
            self.expire_ticket(&mut st, ticket_id)?;
            return Err(PlaneError::TicketExpired(ticket_id.to_string()));
        }
        let req = entry.request.clone();
        let scope = entry.approved_scope.clone();
        let ttl_ms = entry.ttl_ms;
        let digest = entry.ticket.request_digest.clone();
        let level = entry.ticket.level;
        let base = RecordDraft {
            sid: req.sid.clone(),
            act: Some(req.act),
            obj: Some(req.obj.clone()),
            scope: Some(scope.clone()),
            level: Some(level),
            seq: req.seq,
            dec: Some(EnforcementDecision::UserConfirmation),
            res: ResultStatus::Pending,
            event: EvidenceEvent::Confirmation,
            request_digest: Some(digest.clone()),
            grant_id: None,
            note: None,
        };
        let (state, grant) = match decision {
            HumanDecision::Approve => {
                let grant = self.mint_grant(
                    &req,
                    &digest,
                    GrantDecision::UserApproved,
                    level,
                    scope,
                    now + ttl_ms as i64,
                );
                self.append(&mut st, base.with_grant(&grant.grant_id).with_note("approved"))?;
                st.grants.insert(
                    grant.grant_id.clone(),
                    GrantEntry {
                        grant: grant.clone(),
                        closed: false,
                        dispatch: None,
                    },
                );
                (TicketState::Approved, Some(grant))
            }
            HumanDecision::Deny => {
                let mut d = base.with_note("denied by operator");
                d.res = ResultStatus::Denied;
                self.append(&mut st, d)?;
                (TicketState::Denied, None)
            }
        };
        let entry = st.tickets.get_mut(ticket_id).expect("present");
        entry.ticket.state = state;
        entry.grant = grant.clone();
        let ticket = entry.ticket.clone();
        drop(st);
        self.publish_ticket(&ticket);
        Ok(grant)
    }

    fn expire_ticket(&self, st: &mut PlaneState, ticket_id: &str) -> Result<(), PlaneError> {
        let entry = st.tickets.get_mut(ticket_id).expect("present");
        entry.ticket.state = TicketState::Expired;
        let ticket = entry.ticket.clone();
        let req = entry.request.clone();
        let scope = entry.approved_scope.clone();
        self.append(
            st,
            RecordDraft {
                sid: req.sid.clone(),
                act: Some(req.act),
                obj: Some(req.obj.clone()),
                scope: Some(scope),
                level: Some(ticket.level),
                seq: req.seq,
                dec: Some(EnforcementDecision::UserConfirmation),
                res: ResultStatus::Failed,
                event: EvidenceEvent::Confirmation,
                request_digest: Some(ticket.request_digest.clone()),
                grant_id: None,
                note: Some("confirmation expired".into()),
            },
        )?;
        self.publish_ticket(&ticket);
        Ok(())
    }

    pub fn ticket(&self, ticket_id: &str) -> Result<(ConfirmationTicket, Option<AuthorizationGrant>), PlaneError> {
        let st = self.lock();
        let e = st
            .tickets
            .get(ticket_id)
            .ok_or_else(|| PlaneError::UnknownTicket(ticket_id.to_string()))?;
        Ok((e.ticket.clone(), e.grant.clone()))
    }

    pub fn pending_tickets(&self) -> Vec<ConfirmationTicket> {
        let st = self.lock();
        let mut out: Vec<_> = st
            .tickets
            .values()
            .filter(|e| e.ticket.is_pending())
            .map(|e| e.ticket.clone())
            .collect();
        out.sort_by(|a, b| (a.created_at_ms, &a.ticket_id).cmp(&(b.created_at_ms, &b.ticket_id)));
        out
    }

    /// Appends the terminal record for a grant's lifecycle.
    pub fn close_evidence(&self, grant_id: &str, outcome: &ExecutionOutcome) -> Result<EvidenceRecord, PlaneError> {
        let mut st = self.lock();
        self.close_locked(&mut st, grant_id, outcome)
    }

    fn close_locked(
        &self,
        st: &mut PlaneState,
        grant_id: &str,
        outcome: &ExecutionOutcome,
    ) -> Result<EvidenceRecord, PlaneError> {
        let entry = st
            .grants
            .get(grant_id)
            .ok_or_else(|| PlaneError::UnknownGrant(grant_id.to_string()))?;
        if entry.closed {
            return Err(PlaneError::AlreadyClosed(grant_id.to_string()));
        }
        let g = entry.grant.clone();
        let mut note = outcome.detail.clone();
        if let Some(d) = &outcome.output_sha256 {
            note = format!("{note}; output sha256 {d}");
        }
        let rec = self.append(
            st,
            RecordDraft {
                sid: g.sid.clone(),
                act: Some(g.act),
                obj: Some(g.obj.clone()),
                scope: Some(g.approved_scope.clone()),
                level: Some(g.level),
                seq: g.seq,
                dec: Some(g.decision.evidence_decision()),
                res: match outcome.status {
                    OutcomeStatus::Completed => ResultStatus::Completed,
                    OutcomeStatus::Failed => ResultStatus::Failed,
                    OutcomeStatus::Rejected => ResultStatus::Rejected,
                    OutcomeStatus::Inconsistent => ResultStatus::Inconsistent,
                },
                event: EvidenceEvent::Completion,
                request_digest: Some(g.request_digest.clone()),
                grant_id: Some(g.grant_id.clone()),
                note: Some(note),
            },
        )?;
        st.grants.get_mut(grant_id).expect("present").closed = true;
        Ok(rec)
    }

    /// Closes a lifecycle from a MACed executor report.
    pub fn accept_executor_report(&self, report: &ExecutorReport) -> Result<EvidenceRecord, PlaneError> {
        if !report.verify(&self.executor_key) {
            return Err(PlaneError::BadReport("executor report MAC does not verify".into()));
        }
        let mut st = self.lock();
        if let Some(e) = st.grants.get(&report.grant_id) {
            if e.dispatch.is_some() {
                return Err(PlaneError::BadReport("grant was dispatched to an endpoint".into()));
            }
        }
        self.close_locked(&mut st, &report.grant_id, &report.outcome)
    }

    /// Closes a lifecycle from a MACed endpoint report.
    pub fn accept_endpoint_report(&self, report: &EndpointReport) -> Result<EvidenceRecord, PlaneError> {
        let key = self
            .endpoints
            .get(&report.endpoint_id)
            .ok_or_else(|| PlaneError::UnknownEndpoint(report.endpoint_id.clone()))?;
        if !report.verify(key) {
            return Err(PlaneError::BadReport("endpoint report MAC does not verify".into()));
        }
        let mut st = self.lock();
        let entry = st
            .grants
            .get(&report.grant_id)
            .ok_or_else(|| PlaneError::UnknownGrant(report.grant_id.clone()))?;
        // A completion must answer the exact envelope that was sealed; an
        // endpoint may refuse a grant under any channel_seq.
        match &entry.dispatch {
            Some((ep, _)) if *ep != report.endpoint_id => {
                return Err(PlaneError::BadReport("report from a different endpoint".into()))
            }
            Some((_, seq)) if *seq != report.channel_seq && report.outcome.status == OutcomeStatus::Completed => {
                return Err(PlaneError::BadReport(
                    "completion does not match the sealed dispatch".into(),
                ))
            }
            Some(_) => {}
            None => return Err(PlaneError::BadReport("grant was never dispatched".into())),
        }
        self.close_locked(&mut st, &report.grant_id, &report.outcome)
    }

    /// Seals a granted remote command for one endpoint.
    pub fn seal_remote_command(
        &self,
        grant_id: &str,
        command: &CommandSpec,
        endpoint_id: &str,
    ) -> Result<RemoteCommandEnvelope, PlaneError> {
        let key = self
            .endpoints
            .get(endpoint_id)
            .ok_or_else(|| PlaneError::UnknownEndpoint(endpoint_id.to_string()))?;
        let mut st = self.lock();
        let now = self.clock.now_ms();
        let entry = st
            .grants
            .get(grant_id)
            .ok_or_else(|| PlaneError::UnknownGrant(grant_id.to_string()))?;
        if entry.closed {
            return Err(PlaneError::AlreadyClosed(grant_id.to_string()));
        }
        if entry.dispatch.is_some() {
            return Err(PlaneError::AlreadyDispatched(grant_id.to_string()));
        }
        let grant = entry.grant.clone();
        let mismatch = if grant.approved_scope.endpoint.as_deref() != Some(endpoint_id) {
            Some(format!("grant is not scoped to endpoint `{endpoint_id}`"))
        } else if command.act != grant.act || command.obj != grant.obj {
            Some("command does not match the granted operation".to_string())
        } else if command.content_digest() != grant.obj.payload_sha256 {
            Some("command content does not match the granted payload".to_string())
        } else {
            None
        };
        if let Some(msg) = mismatch {
            self.close_locked(
                &mut st,
                grant_id,
                &ExecutionOutcome::inconsistent(format!("seal refused: {msg}")),
            )?;
            return Err(PlaneError::ScopeMismatch(msg));
        }
        let seq = st.channel_seq.entry(endpoint_id.to_string()).or_insert(0);
        *seq += 1;
        let channel_seq = *seq;
        let envelope = RemoteCommandEnvelope {
            v: ENVELOPE_VERSION,
            endpoint_id: endpoint_id.to_string(),
            grant: grant.clone(),
            command_spec: command.clone(),
            channel_seq,
            issued_at_ms: now,
            envelope_mac: String::new(),
        }
        .seal(key);
        self.append(
            &mut st,
            RecordDraft {
                sid: grant.sid.clone(),
                act: Some(grant.act),
                obj: Some(grant.obj.clone()),
                scope: Some(grant.approved_scope.clone()),
                level: Some(grant.level),
                seq: grant.seq,
                dec: Some(grant.decision.evidence_decision()),
                res: ResultStatus::Pending,
                event: EvidenceEvent::Dispatch,
                request_digest: Some(grant.request_digest.clone()),
                grant_id: Some(grant.grant_id.clone()),
                note: Some(format!("sealed for {endpoint_id} channel_seq {channel_seq}")),
            },
        )?;
        st.grants.get_mut(grant_id).expect("present").dispatch = Some((endpoint_id.to_string(), channel_seq));
        Ok(envelope)
    }

    /// Closes every lifecycle whose result deadline has passed and expires
    /// stale tickets. Returns how many lifecycles were closed.
    pub fn sweep(&self) -> Result<usize, PlaneError> {
        let mut st = self.lock();
        let now = self.clock.now_ms();
        let grace = self.completion_grace_ms as i64;
        let mut overdue: Vec<(i64, String)> = st
            .grants
            .values()
            .filter(|e| !e.closed && now >= e.grant.expiry_ms + grace)
            .map(|e| (e.grant.expiry_ms, e.grant.grant_id.clone()))
            .collect();
        overdue.sort();
        let mut closed = 0;
        for (_, id) in overdue {
            self.close_locked(&mut st, &id, &ExecutionOutcome::failed("no result before deadline"))?;
            closed += 1;
        }
        let mut stale: Vec<(i64, String)> = st
            .tickets
            .values()
            .filter(|e| e.ticket.is_pending() && now >= e.ticket.expires_at_ms)
            .map(|e| (e.ticket.expires_at_ms, e.ticket.ticket_id.clone()))
            .collect();
        stale.sort();
        for (_, id) in stale {
            self.expire_ticket(&mut st, &id)?;
            closed += 1;
        }
        Ok(closed)
    }

    pub fn evidence_after(&self, after: u64) -> Vec<EvidenceRecord> {
        self.lock().evidence.after(after).to_vec()
    }

    pub fn evidence_head(&self) -> ChainHead {
        self.lock().evidence.head()
    }

    pub fn evidence_path(&self) -> Option<PathBuf> {
        self.lock().evidence.path().map(|p| p.to_path_buf())
    }

    /// Verifies the stored log (file if persisted, memory otherwise)
    /// against the plane's own chain head.
    pub fn verify(&self) -> VerificationReport {
        let st = self.lock();
        let head = st.evidence.head();
        match st.evidence.path() {
            Some(path) => match read_lines(path) {
                Ok(lines) => verify_lines(&lines, Some(&head)),
                Err(e) => VerificationReport {
                    valid: false,
                    records: 0,
                    head_hash: GENESIS_HASH.to_string(),
                    first_break: Some(0),
                    break_reason: Some(e.to_string()),
                    lifecycle_violations: Vec::new(),
                    open_lifecycles: Vec::new(),
                },
            },
            None => verify_chain(st.evidence.records(), Some(&head)),
        }
    }

    /// Every grant ever issued, for audit checks.
    pub fn issued_grants(&self) -> Vec<AuthorizationGrant> {
        self.lock().grants.values().map(|e| e.grant.clone()).collect()
    }

    /// Routes one protocol message.
    pub fn dispatch(&self, request: &PlaneRequest) -> PlaneResponse {
        let result = match request {
            PlaneRequest::OpenSession { subject } => {
                self.open_session(subject)
                    .map(|(sid, key)| PlaneResponse::SessionOpened {
                        sid,
                        subject: subject.clone(),
                        key_id: key.key_id(),
                        session_key: key,
                        default_ttl_ms: crate::request_plane::DEFAULT_TTL_MS,
                    })
            }
            PlaneRequest::Submit { request, mac } => self.handle_request(request, mac).map(|s| match s {
                Submission::Granted(grant) => PlaneResponse::Granted { grant },
                Submission::Pending(ticket) => PlaneResponse::ConfirmationPending { ticket },
                Submission::Denied { request_digest, reason } => PlaneResponse::Denied { request_digest, reason },
            }),
            PlaneRequest::Report { report } => self
                .accept_executor_report(report)
                .map(|r| PlaneResponse::Closed { record: Box::new(r) }),
            PlaneRequest::RemoteReport { report } => self
                .accept_endpoint_report(report)
                .map(|r| PlaneResponse::Closed { record: Box::new(r) }),
            PlaneRequest::Seal {
                grant_id,
                command,
                endpoint_id,
            } => self
                .seal_remote_command(grant_id, command, endpoint_id)
                .map(|e| PlaneResponse::Sealed { envelope: Box::new(e) }),
            PlaneRequest::TicketStatus { ticket_id } => self
                .ticket(ticket_id)
                .map(|(ticket, grant)| PlaneResponse::Ticket { ticket, grant }),
            PlaneRequest::Confirm { ticket_id, decision } => {
                self.resolve_confirmation(ticket_id, *decision).and_then(|_| {
                    self.ticket(ticket_id)
                        .map(|(ticket, grant)| PlaneResponse::Ticket { ticket, grant })
                })
            }
            PlaneRequest::Pending => Ok(PlaneResponse::PendingTickets {
                tickets: self.pending_tickets(),
            }),
            PlaneRequest::Sweep => self.sweep().map(|closed| PlaneResponse::Swept { closed }),
            PlaneRequest::Evidence { after } => Ok(PlaneResponse::Evidence {
                records: self.evidence_after(after.unwrap_or(0)),
            }),
            PlaneRequest::VerifyEvidence => Ok(PlaneResponse::Verification { report: self.verify() }),
        };
        result.unwrap_or_else(PlaneError::into_response)
    }

    /// Serves the framed protocol on `addr`.
    pub fn serve_frames<A: ToSocketAddrs>(self: &Arc<Self>, addr: A) -> Result<FrameServer, WireError> {
        let plane = Arc::clone(self);
        FrameServer::spawn(addr, move |payload: &[u8]| {
            let response = match serde_json::from_slice::<PlaneRequest>(payload) {
                Ok(req) => plane.dispatch(&req),
                Err(e) => PlaneError::MalformedRequest(e.to_string()).into_response(),
            };
            serde_json::to_value(response).expect("responses serialize")
        })
    }
}

impl PlaneTransport for Arc<TrustedPlane> {
    fn call(&mut self, request: &PlaneRequest) -> Result<PlaneResponse, TransportError> {
        Ok(self.dispatch(request))
    }
}

impl PlaneTransport for &TrustedPlane {
    fn call(&mut self, request: &PlaneRequest) -> Result<PlaneResponse, TransportError> {
        Ok(self.dispatch(request))
    }
}

impl RecordDraft {
    fn with_note(mut self, note: &str) -> Self {
        self.note = Some(note.to_string());
        self
    }

    fn with_grant(mut self, grant_id: &str) -> Self {
        self.grant_id = Some(grant_id.to_string());
        self
    }

    fn event(mut self, event: EvidenceEvent) -> Self {
        self.event = event;
        self
    }
}

fn decision_draft(
    req: &TrustedOperationRequest,
    a: &Assessment,
    digest: &str,
    res: ResultStatus,
    scope: ScopeSpec,
) -> RecordDraft {
    RecordDraft {
        sid: req.sid.clone(),
        act: Some(req.act),
        obj: Some(req.obj.clone()),
        scope: Some(scope),
        level: Some(a.level),
        seq: req.seq,
        dec: Some(a.decision),
        res,
        event: EvidenceEvent::Decision,
        request_digest: Some(digest.to_string()),
        grant_id: None,
        note: Some(format!("vector {}", a.vector)),
    }
}

fn deny_reason(req: &TrustedOperationRequest, a: &Assessment) -> String {
    format!(
        "{} on {} denied at {} (vector {})",
        req.act, req.obj.target, a.level, a.vector
    )
}

fn summarize(req: &TrustedOperationRequest, a: &Assessment) -> String {
    let mut s = format!("{} {}", req.act, req.obj.target);
    if !req.obj.argv.is_empty() {
        s.push_str(&format!(" [{}]", req.obj.command_line()));
    }
    if let Some(d) = &req.obj.destination {
        s.push_str(&format!(" -> {d}"));
    }
    if let Some(e) = &req.scope.endpoint {
        s.push_str(&format!(" on {e}"));
    }
    format!("{s} ({}, vector {})", a.level, a.vector)
}

/// Logical paths an operation touches: target, destination and, for
/// commands, the path arguments bound by `template`.
fn object_paths(req: &TrustedOperationRequest, path_args: &[usize]) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let obj = &req.obj;
    if !logical_path::is_endpoint_designator(&obj.target) {
        out.push(obj.target.clone());
    }
    if let Some(d) = &obj.destination {
        if !logical_path::is_endpoint_designator(d) {
            out.push(logical_path::normalize(d).map_err(|e| e.to_string())?);
        }
    }
    for &i in path_args {
        out.push(logical_path::resolve(&obj.target, &obj.argv[i]).map_err(|e| e.to_string())?);
    }
    out.dedup();
    Ok(out)
}

/// Computes the approved scope: requested scope intersected with the
/// policy's grantable roots and command templates. Confirmed operations get
/// exactly their object.
pub fn approve_scope(req: &TrustedOperationRequest, policy: &Policy, exact: bool) -> Result<ScopeSpec, String> {
    let requested = &req.scope;
    for d in std::iter::once(&req.obj.target).chain(req.obj.destination.iter()) {
        if let Some(ep) = d.strip_prefix(logical_path::ENDPOINT_PREFIX) {
            if requested.endpoint.as_deref() != Some(ep) {
                return Err(format!("object names endpoint `{ep}` outside the requested scope"));
            }
        }
    }

    let commands: Vec<String> = requested
        .commands
        .iter()
        .filter_map(|c| c.parse::<crate::command_template::CommandTemplate>().ok())
        .filter(|t| policy.command_templates().iter().any(|p| p.as_str() == t.as_str()))
        .map(|t| t.as_str().to_string())
        .collect();
    let (commands, path_args) = if req.act.is_command() {
        let hit = commands.iter().find_map(|c| {
            let t: crate::command_template::CommandTemplate = c.parse().expect("parsed above");
            t.match_argv(&req.obj.argv).map(|idx| (c.clone(), idx))
        });
        match hit {
            Some((c, idx)) if exact => (vec![c], idx),
            Some((_, idx)) => (commands, idx),
            None => {
                return Err(format!(
                    "command `{}` matches no approved template",
                    req.obj.command_line()
                ))
            }
        }
    } else {
        (if exact { Vec::new() } else { commands }, Vec::new())
    };

    let objects = object_paths(req, &path_args)?;
    if let Some(p) = objects.iter().find(|p| !requested.covers(p)) {
        return Err(format!("object `{p}` lies outside the requested scope"));
    }

    let paths = if exact {
        objects
    } else {
        let mut clamped: Vec<String> = Vec::new();
        for p in &requested.paths {
            let roots = policy.scope_roots();
            if roots.iter().any(|r| logical_path::is_within(p, r)) {
                clamped.push(p.clone());
            } else {
                clamped.extend(roots.iter().filter(|r| logical_path::is_within(r, p)).cloned());
            }
        }
        clamped.sort();
        clamped.dedup();
        if objects
            .iter()
            .all(|o| clamped.iter().any(|c| logical_path::is_within(o, c)))
        {
            clamped
        } else {
            objects
        }
    };
    Ok(ScopeSpec {
        paths,
        commands,
        endpoint: requested.endpoint.clone(),
    })
}
