//! REE-side constrained executor.
//!
//! Verifies that a presented grant binds exactly the action about to run,
//! performs it inside the sandbox root and reports a MACed outcome back to
//! the plane.

mod ledger;
mod sandbox;

pub use ledger::ConsumptionLedger;
pub use sandbox::{Plan, Sandbox};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::canonical::{sha256_hex, to_canonical_bytes_without};
use crate::clock::{Clock, SystemClock};
use crate::command_template::CommandTemplate;
use crate::crypto::ChannelKey;
use crate::protocol::{PlaneErrorCode, PlaneRequest, PlaneResponse, PlaneTransport, TransportError};
use crate::request_plane::TrustedOperationRequest;
use crate::risk_model::{Action, ObjectRef};
use crate::trusted_plane::{AuthorizationGrant, EvidenceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchCode {
    BadMac,
    Expired,
    DigestMismatch,
    ActionMismatch,
    ObjectMismatch,
    ScopeViolation,
    CommandNotAllowed,
    PayloadMismatch,
    Replayed,
    WrongEndpoint,
    ChannelReplay,
    Malformed,
}

impl MismatchCode {
    /// Authenticity and freshness failures are rejections; a well-formed
    /// grant presented for something else is an inconsistency.
    pub fn status(self) -> OutcomeStatus {
        match self {
            MismatchCode::BadMac
            | MismatchCode::Expired
            | MismatchCode::Replayed
            | MismatchCode::WrongEndpoint
            | MismatchCode::ChannelReplay
            | MismatchCode::Malformed => OutcomeStatus::Rejected,
            _ => OutcomeStatus::Inconsistent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{code:?}: {detail}")]
pub struct Mismatch {
    pub code: MismatchCode,
    pub detail: String,
}

impl Mismatch {
    pub fn new(code: MismatchCode, detail: impl Into<String>) -> Self {
        Self {
            code,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeStatus {
    Completed,
    Failed,
    Rejected,
    Inconsistent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub status: OutcomeStatus,
    pub detail: String,
    pub output_sha256: Option<String>,
    pub output: Option<String>,
    pub mismatch: Option<MismatchCode>,
}

impl ExecutionOutcome {
    pub fn completed(detail: impl Into<String>) -> Self {
        Self {
            status: OutcomeStatus::Completed,
            detail: detail.into(),
            output_sha256: None,
            output: None,
            mismatch: None,
        }
    }

    pub fn completed_with_output(detail: impl Into<String>, output: &[u8]) -> Self {
        Self {
            output_sha256: Some(sha256_hex(output)),
            output: Some(String::from_utf8_lossy(output).into_owned()),
            ..Self::completed(detail)
        }
    }

    pub fn failed(detail: impl Into<String>) -> Self {
        Self {
            status: OutcomeStatus::Failed,
            ..Self::completed(detail)
        }
    }

    pub fn inconsistent(detail: impl Into<String>) -> Self {
        Self {
            status: OutcomeStatus::Inconsistent,
            ..Self::completed(detail)
        }
    }

    pub fn from_mismatch(m: &Mismatch) -> Self {
        Self {
            status: m.code.status(),
            mismatch: Some(m.code),
            ..Self::completed(m.detail.clone())
        }
    }
}

/// What the REE hands the executor: the grant plus the action it wants run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopedAction {
    pub grant: AuthorizationGrant,
    pub act: Action,
    pub obj: ObjectRef,
    /// Content for writes.
    pub content: Option<String>,
    /// Canonical request bytes the grant was issued for.
    pub request: String,
}

/// Outcome report, MACed with the executor channel key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutorReport {
    pub grant_id: String,
    pub outcome: ExecutionOutcome,
    pub mac: String,
}

impl ExecutorReport {
    pub fn new(grant_id: &str, outcome: ExecutionOutcome, key: &ChannelKey) -> Self {
        let mut r = Self {
            grant_id: grant_id.to_string(),
            outcome,
            mac: String::new(),
        };
        r.mac = key.mac_hex(&r.mac_input());
        r
    }

    fn mac_input(&self) -> Vec<u8> {
        to_canonical_bytes_without(self, "mac").expect("no floats")
    }

    pub fn verify(&self, key: &ChannelKey) -> bool {
        key.verify_hex(&self.mac_input(), &self.mac)
    }
}

/// A grant that passed every check, with its resolved plan.
#[derive(Debug, Clone)]
pub struct VerifiedAction {
    pub action: ScopedAction,
    pub plan: Plan,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub sandbox_root: PathBuf,
    pub journal: Option<PathBuf>,
    pub spool: Option<PathBuf>,
    /// Command templates this executor is willing to run at all.
    #[serde(default)]
    pub allowlist: Vec<String>,
}

impl ExecutorConfig {
    pub fn load(path: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error("executor i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad allowlist entry: {0}")]
    Allowlist(#[from] crate::command_template::TemplateError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ack {
    Closed(Box<EvidenceRecord>),
    /// The plane had already closed this lifecycle.
    Duplicate,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("plane unreachable, outcome spooled: {0}")]
    PlaneUnreachable(TransportError),
    #[error("plane refused report: {code:?}: {message}")]
    Refused { code: PlaneErrorCode, message: String },
    #[error("unexpected plane response")]
    Protocol,
}

const REPORT_ATTEMPTS: u32 = 3;
const REPORT_BACKOFF: Duration = Duration::from_millis(10);

pub struct ConstrainedExecutor {
    sandbox: Sandbox,
    key: ChannelKey,
    clock: Arc<dyn Clock>,
    allowlist: Vec<CommandTemplate>,
    ledger: Mutex<ConsumptionLedger>,
    spool: Mutex<Vec<ExecutorReport>>,
    spool_path: Option<PathBuf>,
    presented: AtomicU64,
    performed: AtomicU64,
    ree_log: Mutex<Vec<String>>,
}

impl std::fmt::Debug for ConstrainedExecutor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConstrainedExecutor")
            .field("root", &self.sandbox.root())
            .field("key", &self.key)
            .finish_non_exhaustive()
    }
}

impl ConstrainedExecutor {
    pub fn new(config: &ExecutorConfig, key: ChannelKey) -> Result<Self, ExecutorError> {
        Self::with_clock(config, key, Arc::new(SystemClock))
    }

    pub fn with_clock(config: &ExecutorConfig, key: ChannelKey, clock: Arc<dyn Clock>) -> Result<Self, ExecutorError> {
        let allowlist = config
            .allowlist
            .iter()
            .map(|s| s.parse())
            .collect::<Result<Vec<CommandTemplate>, _>>()?;
        let ledger = match &config.journal {
            Some(p) => ConsumptionLedger::open(p)?,
            None => ConsumptionLedger::in_memory(),
        };
        let spool = match &config.spool {
            Some(p) if p.exists() => fs::read_to_string(p)?
                .lines()
                .filter_map(|l| serde_json::from_str(l).ok())
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            sandbox: Sandbox::new(&config.sandbox_root)?,
            key,
            clock,
            allowlist,
            ledger: Mutex::new(ledger),
            spool: Mutex::new(spool),
            spool_path: config.spool.clone(),
            presented: AtomicU64::new(0),
            performed: AtomicU64::new(0),
            ree_log: Mutex::new(Vec::new()),
        })
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    /// Number of scoped actions presented for verification.
    pub fn presentations(&self) -> u64 {
        self.presented.load(Ordering::SeqCst)
    }

    /// Number of actions that passed verification and were performed.
    pub fn performed(&self) -> u64 {
        self.performed.load(Ordering::SeqCst)
    }

    /// Untrusted REE-side log of ordinary-path operations.
    pub fn ree_log(&self) -> Vec<String> {
        self.ree_log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Runs every check in order; consumes the grant only when all pass.
    pub fn verify_grant(&self, action: &ScopedAction) -> Result<VerifiedAction, Mismatch> {
        self.presented.fetch_add(1, Ordering::SeqCst);
        let g = &action.grant;
        if !g.verify(&self.key) {
            return Err(Mismatch::new(MismatchCode::BadMac, "grant MAC does not verify"));
        }
        if g.is_expired(self.clock.now_ms()) {
            return Err(Mismatch::new(MismatchCode::Expired, "grant has expired"));
        }
        if sha256_hex(action.request.as_bytes()) != g.request_digest {
            return Err(Mismatch::new(
                MismatchCode::DigestMismatch,
                "request bytes do not match the grant digest",
            ));
        }
        let request: TrustedOperationRequest =
            serde_json::from_str(&action.request).map_err(|e| Mismatch::new(MismatchCode::Malformed, e.to_string()))?;
        if action.act != g.act || request.act != g.act {
            return Err(Mismatch::new(
                MismatchCode::ActionMismatch,
                format!("granted {}, presented {}", g.act, action.act),
            ));
        }
        if action.obj != g.obj || request.obj != g.obj || request.sid != g.sid || request.seq != g.seq {
            return Err(Mismatch::new(
                MismatchCode::ObjectMismatch,
                format!("granted {}, presented {}", g.obj.target, action.obj.target),
            ));
        }
        let plan = self.sandbox.plan(
            action.act,
            &action.obj,
            action.content.as_deref(),
            &g.approved_scope,
            &self.allowlist,
        )?;
        self.ledger
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .consume(&g.grant_id)
            .map_err(|e| match e {
                ledger::ConsumeError::Replayed => {
                    Mismatch::new(MismatchCode::Replayed, format!("grant {} already consumed", g.grant_id))
                }
                ledger::ConsumeError::Io(e) => Mismatch::new(MismatchCode::Malformed, e.to_string()),
            })?;
        Ok(VerifiedAction {
            action: action.clone(),
            plan,
        })
    }

    /// Performs a verified action. The plan is re-resolved first; any
    /// divergence since verification makes the outcome inconsistent.
    pub fn execute_local(&self, verified: &VerifiedAction) -> ExecutionOutcome {
        let a = &verified.action;
        let again = self.sandbox.plan(
            a.act,
            &a.obj,
            a.content.as_deref(),
            &a.grant.approved_scope,
            &self.allowlist,
        );
        match again {
            Ok(p) if p == verified.plan => {}
            Ok(_) => return ExecutionOutcome::inconsistent("resolved paths changed after verification"),
            Err(m) => return ExecutionOutcome::inconsistent(format!("post-verify divergence: {}", m.detail)),
        }
        self.performed.fetch_add(1, Ordering::SeqCst);
        let out = self.sandbox.perform(&verified.plan, &a.grant.grant_id);
        if a.grant.decision == crate::trusted_plane::GrantDecision::Ree {
            self.ree_log
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .push(format!("{} {} {:?}", a.act, a.obj.target, out.status));
        }
        out
    }

    /// verify_grant then execute_local.
    pub fn run(&self, action: &ScopedAction) -> ExecutionOutcome {
        match self.verify_grant(action) {
            Ok(v) => self.execute_local(&v),
            Err(m) => ExecutionOutcome::from_mismatch(&m),
        }
    }

    pub fn sign_report(&self, grant_id: &str, outcome: ExecutionOutcome) -> ExecutorReport {
        ExecutorReport::new(grant_id, outcome, &self.key)
    }

    /// Delivers an outcome, retrying with backoff. Undeliverable reports are
    /// spooled for [`Self::flush_spool`].
    pub fn report_result<T: PlaneTransport + ?Sized>(
        &self,
        plane: &mut T,
        grant_id: &str,
        outcome: ExecutionOutcome,
    ) -> Result<Ack, ReportError> {
        let report = self.sign_report(grant_id, outcome);
        self.deliver(plane, report)
    }

    fn deliver<T: PlaneTransport + ?Sized>(&self, plane: &mut T, report: ExecutorReport) -> Result<Ack, ReportError> {
        let msg = PlaneRequest::Report { report: report.clone() };
        let mut last = None;
        for attempt in 0..REPORT_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(REPORT_BACKOFF * 2u32.pow(attempt - 1));
            }
            match plane.call(&msg) {
                Ok(PlaneResponse::Closed { record }) => return Ok(Ack::Closed(record)),
                Ok(PlaneResponse::Error {
                    code: PlaneErrorCode::AlreadyClosed,
                    ..
                }) => return Ok(Ack::Duplicate),
                Ok(PlaneResponse::Error { code, message }) => return Err(ReportError::Refused { code, message }),
                Ok(_) => return Err(ReportError::Protocol),
                Err(e) => last = Some(e),
            }
        }
        self.push_spool(report);
        Err(ReportError::PlaneUnreachable(
            last.unwrap_or(TransportError::Unreachable),
        ))
    }

    fn push_spool(&self, report: ExecutorReport) {
        let mut spool = self.spool.lock().unwrap_or_else(|p| p.into_inner());
        spool.push(report);
        self.persist_spool(&spool);
    }

    fn persist_spool(&self, spool: &[ExecutorReport]) {
        if let Some(p) = &self.spool_path {
            let body: String = spool
                .iter()
                .map(|r| format!("{}\n", serde_json::to_string(r).expect("serializable")))
                .collect();
            let _ = fs::write(p, body);
        }
    }

    pub fn spooled(&self) -> usize {
        self.spool.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    /// Retries every spooled report once. Returns how many were delivered.
    pub fn flush_spool<T: PlaneTransport + ?Sized>(&self, plane: &mut T) -> usize {
        let pending = std::mem::take(&mut *self.spool.lock().unwrap_or_else(|p| p.into_inner()));
        let mut delivered = 0;
        let mut keep = Vec::new();
        for r in pending {
            match plane.call(&PlaneRequest::Report { report: r.clone() }) {
                Ok(PlaneResponse::Closed { .. })
                | Ok(PlaneResponse::Error {
                    code: PlaneErrorCode::AlreadyClosed,
                    ..
                }) => delivered += 1,
                Ok(_) => {}
                Err(_) => keep.push(r),
            }
        }
        let mut spool = self.spool.lock().unwrap_or_else(|p| p.into_inner());
        spool.extend(keep);
        self.persist_spool(&spool);
        delivered
    }
}
