//! Runs the built-in workload tasks in baseline or protected mode against
//! the fixture trees and loopback endpoints, and checks the outcome.

pub mod fixtures;
pub mod inject;
pub mod latency;
pub mod tasks;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes;
use crate::constrained_executor::{
    Ack, ConstrainedExecutor, ExecutionOutcome, ExecutorConfig, MismatchCode, OutcomeStatus, Sandbox, ScopedAction,
};
use crate::crypto::ChannelKey;
use crate::protocol::{PlaneErrorCode, PlaneRequest, PlaneResponse, PlaneTransport, RemotePlane};
use crate::remote_endpoint::{
    CommandSpec, EndpointClient, EndpointConfig, EndpointKeyring, RemoteCommandEnvelope, RemoteEndpoint,
    VerificationProfile,
};
use crate::request_plane::{SessionState, TrustedOperationRequest};
use crate::risk_model::{assess, Action, EnforcementDecision, OperationInstance, Policy, SecurityLevel};
use crate::trusted_plane::{
    AuthorizationGrant, EvidenceEvent, EvidenceRecord, HumanDecision, PlaneConfig, ResultStatus, TrustedPlane,
    VerificationReport,
};
use crate::wire::FrameServer;

pub use fixtures::{init_fixtures, init_fixtures_with, FixtureManifest, FixtureRole};
pub use inject::{Injection, InjectionSummary, InjectionVerdict};
pub use latency::{emit_latency_report, latency_structure, LatencyDocument, LatencyStructure, Mode, PhaseTiming};
pub use tasks::{builtin_tasks, OpSpec, TaskSpec};

pub const REPORT_SCHEMA: &str = "opgate.harness-report/1";
const IO_TIMEOUT: Duration = Duration::from_secs(30);
const STATE_DIR: &str = "state";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("fixture missing: {0}")]
    FixtureMissing(String),
    #[error("component failed to start: {0}")]
    ComponentSpawnFailure(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("protocol failure: {0}")]
    Protocol(String),
    #[error("harness i/o: {0}")]
    Io(#[from] io::Error),
}

fn protocol<E: std::fmt::Display>(e: E) -> HarnessError {
    HarnessError::Protocol(e.to_string())
}

fn spawn_failure<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> HarnessError + '_ {
    move |e| HarnessError::ComponentSpawnFailure(format!("{what}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointSpec {
    pub id: String,
    pub profile: VerificationProfile,
    pub verify_delay_ms: Option<u64>,
}

impl EndpointSpec {
    pub fn new(id: &str, profile: VerificationProfile) -> Self {
        Self {
            id: id.to_string(),
            profile,
            verify_delay_ms: None,
        }
    }

    /// A fast-verify and a slow-setup endpoint.
    pub fn defaults() -> Vec<Self> {
        vec![
            Self::new(fixtures::DEFAULT_ENDPOINTS[0], VerificationProfile::FastVerify),
            Self::new(fixtures::DEFAULT_ENDPOINTS[1], VerificationProfile::SlowSetup),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub fixture_root: PathBuf,
    /// Task ids to run; `None` runs all twelve.
    pub tasks: Option<Vec<String>>,
    pub mode: Mode,
    pub policy: Policy,
    pub inject: Injection,
    pub injections: usize,
    pub seed: u64,
    pub repeats: usize,
    pub endpoints: Vec<EndpointSpec>,
    /// Answer given to confirmation tickets when no console is attached.
    pub confirm: HumanDecision,
    pub parallel: bool,
    pub evidence_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub completion_grace_ms: u64,
}

impl RunConfig {
    pub fn new(fixture_root: impl Into<PathBuf>) -> Self {
        Self {
            fixture_root: fixture_root.into(),
            tasks: None,
            mode: Mode::Protected,
            policy: Policy::default(),
            inject: Injection::None,
            injections: 100,
            seed: 0x5eed,
            repeats: 1,
            endpoints: EndpointSpec::defaults(),
            confirm: HumanDecision::Deny,
            parallel: false,
            evidence_path: None,
            report_path: None,
            completion_grace_ms: 50,
        }
    }

    fn state_dir(&self) -> PathBuf {
        self.fixture_root.join(STATE_DIR)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpResult {
    pub act: Action,
    pub target: String,
    pub endpoint: Option<String>,
    pub vector: [u8; 4],
    pub level: SecurityLevel,
    pub decision: Option<EnforcementDecision>,
    pub expected: EnforcementDecision,
    pub sid: Option<String>,
    pub seq: Option<u64>,
    pub grant_id: Option<String>,
    pub status: Option<OutcomeStatus>,
    pub mismatch: Option<MismatchCode>,
    pub evidence_res: Option<ResultStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRun {
    pub task_id: String,
    pub endpoint: Option<String>,
    pub repeat: usize,
    pub decision: Option<EnforcementDecision>,
    pub expected: EnforcementDecision,
    pub ops: Vec<OpResult>,
    /// Executor presentations and endpoint frames observed during the task.
    pub executor_invocations: u64,
    pub endpoint_frames: u64,
}

impl TaskRun {
    pub fn label(&self) -> String {
        match &self.endpoint {
            Some(ep) => format!("{}@{ep}", self.task_id),
            None => self.task_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expectation {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Expectation {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub schema: String,
    pub mode: Mode,
    pub inject: Injection,
    pub seed: u64,
    pub repeats: usize,
    pub policy_digest: String,
    pub endpoints: Vec<EndpointSpec>,
    pub runs: Vec<TaskRun>,
    pub samples: Vec<PhaseTiming>,
    pub timings: Vec<PhaseTiming>,
    pub evidence_path: Option<String>,
    pub evidence: Option<VerificationReport>,
    pub protected_changed: Vec<String>,
    pub injection: Option<InjectionSummary>,
    pub expectations: Vec<Expectation>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn to_canonical_json(&self) -> Vec<u8> {
        to_canonical_bytes(self).expect("reports contain no floats")
    }

    pub fn failures(&self) -> impl Iterator<Item = &Expectation> {
        self.expectations.iter().filter(|e| !e.passed)
    }

    pub fn runs_of(&self, task_id: &str) -> impl Iterator<Item = &TaskRun> {
        let id = task_id.to_string();
        self.runs.iter().filter(move |r| r.task_id == id)
    }
}

fn select_tasks(filter: &Option<Vec<String>>) -> Result<Vec<TaskSpec>, HarnessError> {
    let all = builtin_tasks();
    let Some(ids) = filter else { return Ok(all) };
    ids.iter()
        .map(|id| {
            all.iter()
                .find(|t| t.id == *id)
                .cloned()
                .ok_or_else(|| HarnessError::UnknownTask(id.clone()))
        })
        .collect()
}

fn check_fixtures(cfg: &RunConfig) -> Result<FixtureManifest, HarnessError> {
    let root = &cfg.fixture_root;
    let manifest = FixtureManifest::load(root)
        .map_err(|e| HarnessError::FixtureMissing(format!("{}: {e}", root.join(fixtures::MANIFEST_FILE).display())))?;
    if let Some(p) = manifest.first_missing(root) {
        return Err(HarnessError::FixtureMissing(p));
    }
    for ep in &cfg.endpoints {
        if !manifest.endpoints.contains(&ep.id) {
            return Err(HarnessError::FixtureMissing(format!(
                "no fixture tree for endpoint {}",
                ep.id
            )));
        }
    }
    Ok(manifest)
}

/// Runs the selected tasks and writes the report if a path is configured.
pub fn run_suite(cfg: &RunConfig) -> Result<SuiteReport, HarnessError> {
    let manifest = check_fixtures(cfg)?;
    let tasks = select_tasks(&cfg.tasks)?;
    fs::create_dir_all(cfg.state_dir())?;
    let before = manifest.snapshot(&cfg.fixture_root, &fixtures::UNTOUCHABLE);

    let mut report = match cfg.mode {
        Mode::Baseline => run_baseline(cfg, &tasks)?,
        Mode::Protected => run_protected(cfg, &tasks)?,
    };

    let after = manifest.snapshot(&cfg.fixture_root, &fixtures::UNTOUCHABLE);
    report.protected_changed = before
        .iter()
        .filter(|(p, d)| after.get(*p) != Some(d))
        .map(|(p, _)| p.clone())
        .collect();
    report.expectations.push(Expectation::new(
        "protected-fixtures",
        report.protected_changed.is_empty(),
        if report.protected_changed.is_empty() {
            "protected, system and user-config fixtures byte-identical".to_string()
        } else {
            format!("changed: {}", report.protected_changed.join(", "))
        },
    ));
    report.passed = report.expectations.iter().all(|e| e.passed);
    if let Some(p) = &cfg.report_path {
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, report.to_canonical_json())?;
    }
    Ok(report)
}

fn empty_report(cfg: &RunConfig) -> SuiteReport {
    SuiteReport {
        schema: REPORT_SCHEMA.to_string(),
        mode: cfg.mode,
        inject: cfg.inject,
        seed: cfg.seed,
        repeats: cfg.repeats.max(1),
        policy_digest: cfg.policy.digest().to_string(),
        endpoints: cfg.endpoints.clone(),
        runs: Vec::new(),
        samples: Vec::new(),
        timings: Vec::new(),
        evidence_path: None,
        evidence: None,
        protected_changed: Vec::new(),
        injection: None,
        expectations: Vec::new(),
        passed: false,
    }
}

/// Task variants: local tasks once, remote tasks once per endpoint.
fn variants<'a>(tasks: &'a [TaskSpec], endpoints: &'a [EndpointSpec]) -> Vec<(&'a TaskSpec, Option<&'a EndpointSpec>)> {
    let mut out = Vec::new();
    for t in tasks {
        if t.is_remote() {
            out.extend(endpoints.iter().map(|e| (t, Some(e))));
        } else {
            out.push((t, None));
        }
    }
    out
}

fn micros(d: Duration) -> u64 {
    d.as_micros().try_into().unwrap_or(u64::MAX)
}

fn op_skeleton(
    op: &OpSpec,
    obj: &crate::risk_model::ObjectRef,
    endpoint: Option<&EndpointSpec>,
    policy: &Policy,
) -> OpResult {
    let (vector, level) = OperationInstance::from_parts("agent", op.act, obj.clone(), op.ctx, policy)
        .and_then(|i| assess(&i, policy))
        .map(|a| (a.vector.components(), a.level))
        .unwrap_or(([0; 4], SecurityLevel::L0));
    OpResult {
        act: op.act,
        target: obj.target.clone(),
        endpoint: if op.remote {
            endpoint.map(|e| e.id.clone())
        } else {
            None
        },
        vector,
        level,
        decision: None,
        expected: op.expected,
        sid: None,
        seq: None,
        grant_id: None,
        status: None,
        mismatch: None,
        evidence_res: None,
    }
}

// ---------------------------------------------------------------- baseline

fn run_baseline(cfg: &RunConfig, tasks: &[TaskSpec]) -> Result<SuiteReport, HarnessError> {
    // Direct execution mutates whatever it touches, so it gets a scratch tree.
    let scratch = cfg.state_dir().join("baseline");
    let ids: Vec<&str> = cfg.endpoints.iter().map(|e| e.id.as_str()).collect();
    init_fixtures_with(&scratch, &ids)?;
    let sandbox = Sandbox::new(fixtures::host_root(&scratch)).map_err(spawn_failure("baseline sandbox"))?;
    let mut live = Vec::new();
    for spec in &cfg.endpoints {
        let keyring_path = scratch.join(format!("{}.keyring.json", spec.id));
        EndpointKeyring::new(&spec.id, ChannelKey::generate()).save(&keyring_path)?;
        let ep = RemoteEndpoint::from_config(&EndpointConfig {
            endpoint_id: spec.id.clone(),
            keyring_path,
            fixture_root: fixtures::endpoint_root(&scratch, &spec.id),
            profile: spec.profile,
            verify_delay_ms: spec.verify_delay_ms,
            allow_direct: true,
        })
        .map_err(spawn_failure("endpoint"))?;
        let ep = Arc::new(ep);
        let server = ep.serve("127.0.0.1:0").map_err(spawn_failure("endpoint listener"))?;
        let client =
            EndpointClient::connect(server.local_addr(), IO_TIMEOUT).map_err(spawn_failure("endpoint client"))?;
        live.push((spec.id.clone(), server, Mutex::new(client)));
    }

    let mut report = empty_report(cfg);
    for repeat in 0..cfg.repeats.max(1) {
        for (task, endpoint) in variants(tasks, &cfg.endpoints) {
            let mut collected = Vec::new();
            let mut ops = Vec::new();
            let mut total = Duration::ZERO;
            for op in &task.ops {
                let content = op.content(&collected);
                let obj = op.obj.clone();
                let mut r = op_skeleton(op, &obj, endpoint, &cfg.policy);
                let t0 = Instant::now();
                let outcome = match (op.remote, endpoint) {
                    (true, Some(ep)) => {
                        let (_, _, client) = live.iter().find(|(id, _, _)| *id == ep.id).expect("spawned");
                        let cmd = CommandSpec {
                            act: op.act,
                            obj,
                            content,
                        };
                        client
                            .lock()
                            .unwrap_or_else(|p| p.into_inner())
                            .send_direct(&cmd)
                            .map_err(protocol)?
                    }
                    _ => match sandbox.plan_direct(op.act, &obj, content.as_deref()) {
                        Ok(plan) => sandbox.perform(&plan, "direct"),
                        Err(m) => ExecutionOutcome::from_mismatch(&m),
                    },
                };
                total += t0.elapsed();
                if outcome.status == OutcomeStatus::Completed {
                    if let Some(o) = &outcome.output {
                        collected.push(o.clone());
                    }
                }
                r.status = Some(outcome.status);
                r.mismatch = outcome.mismatch;
                ops.push(r);
            }
            let run = TaskRun {
                task_id: task.id.clone(),
                endpoint: endpoint.map(|e| e.id.clone()),
                repeat,
                decision: None,
                expected: task.expected,
                ops,
                executor_invocations: 0,
                endpoint_frames: 0,
            };
            let direct = run
                .ops
                .iter()
                .all(|o| o.status.is_some_and(|s| s != OutcomeStatus::Rejected));
            if repeat == 0 {
                report.expectations.push(Expectation::new(
                    format!("baseline {}", run.label()),
                    direct,
                    format!("{} ops on the direct path", run.ops.len()),
                ));
            }
            report.samples.push(PhaseTiming {
                task_id: task.id.clone(),
                endpoint: endpoint.map(|e| e.id.clone()),
                mode: Mode::Baseline,
                denied: false,
                authorize_us: 0,
                execute_us: micros(total),
                complete_us: 0,
                total_us: micros(total),
            });
            report.runs.push(run);
        }
    }
    report.timings = latency::median_timings(&report.samples);
    Ok(report)
}

// --------------------------------------------------------------- protected

pub(crate) struct LiveEndpoint {
    pub spec: EndpointSpec,
    pub endpoint: Arc<RemoteEndpoint>,
    pub addr: SocketAddr,
    /// Held from seal through delivery so envelopes reach the endpoint in
    /// channel_seq order.
    pub channel: Mutex<()>,
    _server: FrameServer,
}

/// The spawned plane, executor and endpoints.
pub(crate) struct Stack {
    pub plane_addr: SocketAddr,
    pub executor: ConstrainedExecutor,
    pub endpoints: Vec<LiveEndpoint>,
    pub policy: Policy,
    pub confirm: HumanDecision,
    pub completion_grace_ms: u64,
    _plane_server: FrameServer,
}

/// One client's connections.
pub(crate) struct Worker {
    pub plane: RemotePlane,
    pub clients: BTreeMap<String, EndpointClient>,
}

impl Stack {
    fn spawn(cfg: &RunConfig) -> Result<Self, HarnessError> {
        let state = cfg.state_dir();
        for f in ["consumed.journal", "spool.jsonl"] {
            match fs::remove_file(state.join(f)) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        let executor_key = ChannelKey::generate();
        let mut plane_cfg = PlaneConfig::new(cfg.policy.clone(), executor_key.clone());
        plane_cfg.evidence_path = Some(
            cfg.evidence_path
                .clone()
                .unwrap_or_else(|| state.join("evidence.jsonl")),
        );
        plane_cfg.completion_grace_ms = cfg.completion_grace_ms;

        let mut endpoints = Vec::new();
        let mut pending = Vec::new();
        for spec in &cfg.endpoints {
            let key = ChannelKey::generate();
            plane_cfg.endpoints.insert(spec.id.clone(), key.clone());
            let keyring_path = state.join(format!("{}.keyring.json", spec.id));
            EndpointKeyring::new(&spec.id, key).save(&keyring_path)?;
            pending.push((spec.clone(), keyring_path));
        }
        let plane = Arc::new(TrustedPlane::new(plane_cfg).map_err(spawn_failure("plane"))?);
        let plane_server = plane
            .serve_frames("127.0.0.1:0")
            .map_err(spawn_failure("plane listener"))?;
        for (spec, keyring_path) in pending {
            let ep = RemoteEndpoint::from_config(&EndpointConfig {
                endpoint_id: spec.id.clone(),
                keyring_path,
                fixture_root: fixtures::endpoint_root(&cfg.fixture_root, &spec.id),
                profile: spec.profile,
                verify_delay_ms: spec.verify_delay_ms,
                allow_direct: false,
            })
            .map_err(spawn_failure("endpoint"))?;
            let endpoint = Arc::new(ep);
            let server = endpoint
                .serve("127.0.0.1:0")
                .map_err(spawn_failure("endpoint listener"))?;
            endpoints.push(LiveEndpoint {
                spec,
                endpoint,
                addr: server.local_addr(),
                channel: Mutex::new(()),
                _server: server,
            });
        }
        let executor = ConstrainedExecutor::new(
            &ExecutorConfig {
                sandbox_root: fixtures::host_root(&cfg.fixture_root),
                journal: Some(state.join("consumed.journal")),
                spool: Some(state.join("spool.jsonl")),
                allowlist: Vec::new(),
            },
            executor_key,
        )
        .map_err(spawn_failure("executor"))?;
        Ok(Self {
            plane_addr: plane_server.local_addr(),
            executor,
            endpoints,
            policy: cfg.policy.clone(),
            confirm: cfg.confirm,
            completion_grace_ms: cfg.completion_grace_ms,
            _plane_server: plane_server,
        })
    }

    pub fn worker(&self) -> Result<Worker, HarnessError> {
        let plane = RemotePlane::connect(self.plane_addr).map_err(spawn_failure("plane connection"))?;
        let mut clients = BTreeMap::new();
        for e in &self.endpoints {
            clients.insert(
                e.spec.id.clone(),
                EndpointClient::connect(e.addr, IO_TIMEOUT).map_err(spawn_failure("endpoint connection"))?,
            );
        }
        Ok(Worker { plane, clients })
    }

    pub fn endpoint(&self, id: &str) -> &LiveEndpoint {
        self.endpoints
            .iter()
            .find(|e| e.spec.id == id)
            .expect("configured endpoint")
    }

    pub fn endpoint_frames(&self) -> u64 {
        self.endpoints.iter().map(|e| e.endpoint.received_frames()).sum()
    }

    pub fn endpoint_executions(&self) -> u64 {
        self.endpoints.iter().map(|e| e.endpoint.executed()).sum()
    }
}

pub(crate) enum Authz {
    Granted(Box<AuthorizationGrant>, EnforcementDecision),
    Refused(EnforcementDecision, String),
}

pub(crate) fn call(plane: &mut RemotePlane, req: &PlaneRequest) -> Result<PlaneResponse, HarnessError> {
    plane.call(req).map_err(protocol)
}

/// Submits a request and resolves any confirmation ticket.
pub(crate) fn authorize(
    w: &mut Worker,
    session: &SessionState,
    req: &TrustedOperationRequest,
    confirm: HumanDecision,
) -> Result<Authz, HarnessError> {
    match call(&mut w.plane, &session.submission(req))? {
        PlaneResponse::Granted { grant } => {
            let d = grant.decision.evidence_decision();
            Ok(Authz::Granted(Box::new(grant), d))
        }
        PlaneResponse::Denied { reason, .. } => Ok(Authz::Refused(EnforcementDecision::Deny, reason)),
        PlaneResponse::ConfirmationPending { ticket } => {
            match call(
                &mut w.plane,
                &PlaneRequest::Confirm {
                    ticket_id: ticket.ticket_id.clone(),
                    decision: confirm,
                },
            )? {
                PlaneResponse::Ticket { grant: Some(g), .. } => {
                    Ok(Authz::Granted(Box::new(g), EnforcementDecision::UserConfirmation))
                }
                PlaneResponse::Ticket { .. } => Ok(Authz::Refused(
                    EnforcementDecision::UserConfirmation,
                    "operator denied".into(),
                )),
                other => Err(HarnessError::Protocol(format!("confirm: {other:?}"))),
            }
        }
        other => Err(HarnessError::Protocol(format!("submit: {other:?}"))),
    }
}

pub(crate) fn seal(
    w: &mut Worker,
    grant_id: &str,
    command: CommandSpec,
    endpoint_id: &str,
) -> Result<Result<RemoteCommandEnvelope, (PlaneErrorCode, String)>, HarnessError> {
    match call(
        &mut w.plane,
        &PlaneRequest::Seal {
            grant_id: grant_id.to_string(),
            command,
            endpoint_id: endpoint_id.to_string(),
        },
    )? {
        PlaneResponse::Sealed { envelope } => Ok(Ok(*envelope)),
        PlaneResponse::Error { code, message } => Ok(Err((code, message))),
        other => Err(HarnessError::Protocol(format!("seal: {other:?}"))),
    }
}

pub(crate) fn scoped_action(
    grant: &AuthorizationGrant,
    req: &TrustedOperationRequest,
    content: Option<String>,
) -> ScopedAction {
    ScopedAction {
        grant: grant.clone(),
        act: req.act,
        obj: req.obj.clone(),
        content,
        request: String::from_utf8(req.canonical_bytes()).expect("canonical JSON is UTF-8"),
    }
}

pub(crate) fn fetch_evidence(w: &mut Worker) -> Result<Vec<EvidenceRecord>, HarnessError> {
    match call(&mut w.plane, &PlaneRequest::Evidence { after: None })? {
        PlaneResponse::Evidence { records } => Ok(records),
        other => Err(HarnessError::Protocol(format!("evidence: {other:?}"))),
    }
}

pub(crate) fn lifecycles(records: &[EvidenceRecord]) -> BTreeMap<(String, u64), Vec<&EvidenceRecord>> {
    let mut m: BTreeMap<(String, u64), Vec<&EvidenceRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.event != EvidenceEvent::Rejection) {
        m.entry(r.lifecycle_key()).or_default().push(r);
    }
    m
}

struct Timed {
    run: TaskRun,
    timing: PhaseTiming,
}

fn run_protected_task(
    stack: &Stack,
    w: &mut Worker,
    task: &TaskSpec,
    endpoint: Option<&EndpointSpec>,
    repeat: usize,
) -> Result<Timed, HarnessError> {
    let mut session = SessionState::open(&mut w.plane, &format!("agent/{}", task.id)).map_err(protocol)?;
    let presented_before = stack.executor.presentations();
    let frames_before = stack.endpoint_frames();
    let (mut auth, mut exec, mut comp) = (Duration::ZERO, Duration::ZERO, Duration::ZERO);
    let mut collected = Vec::new();
    let mut ops = Vec::new();

    for op in &task.ops {
        let content = op.content(&collected);
        let mut obj = op.obj.clone();
        if let Some(c) = &content {
            obj = obj.with_payload(c.as_bytes());
        }
        let ep = if op.remote { endpoint } else { None };
        let mut scope = op.scope.clone();
        if let Some(ep) = ep {
            scope = scope.on_endpoint(&ep.id);
        }
        let mut r = op_skeleton(op, &obj, endpoint, &stack.policy);

        let t0 = Instant::now();
        let req = session.build_request(op.act, obj, scope, op.ctx).map_err(protocol)?;
        r.sid = Some(req.sid.clone());
        r.seq = Some(req.seq);
        let (grant, decision) = match authorize(w, &session, &req, stack.confirm)? {
            Authz::Granted(g, d) => (*g, d),
            Authz::Refused(d, _) => {
                auth += t0.elapsed();
                r.decision = Some(d);
                ops.push(r);
                break;
            }
        };
        r.decision = Some(decision);
        r.grant_id = Some(grant.grant_id.clone());

        let outcome = match ep {
            None => {
                auth += t0.elapsed();
                let t1 = Instant::now();
                let outcome = stack.executor.run(&scoped_action(&grant, &req, content));
                exec += t1.elapsed();
                let t2 = Instant::now();
                let ack = stack
                    .executor
                    .report_result(&mut w.plane, &grant.grant_id, outcome.clone());
                comp += t2.elapsed();
                match ack {
                    Ok(Ack::Closed(rec)) => r.evidence_res = Some(rec.res),
                    Ok(Ack::Duplicate) => {}
                    Err(e) => return Err(protocol(e)),
                }
                outcome
            }
            Some(ep) => {
                let live = stack.endpoint(&ep.id);
                let guard = live.channel.lock().unwrap_or_else(|p| p.into_inner());
                let cmd = CommandSpec {
                    act: req.act,
                    obj: req.obj.clone(),
                    content,
                };
                let envelope = seal(w, &grant.grant_id, cmd, &ep.id)?
                    .map_err(|(code, m)| HarnessError::Protocol(format!("seal refused: {code:?}: {m}")))?;
                auth += t0.elapsed();
                let t1 = Instant::now();
                let report = w
                    .clients
                    .get_mut(&ep.id)
                    .expect("client per endpoint")
                    .send_envelope(&envelope)
                    .map_err(protocol)?;
                exec += t1.elapsed();
                drop(guard);
                let t2 = Instant::now();
                let resp = call(&mut w.plane, &PlaneRequest::RemoteReport { report: report.clone() })?;
                comp += t2.elapsed();
                match resp {
                    PlaneResponse::Closed { record } => r.evidence_res = Some(record.res),
                    other => return Err(HarnessError::Protocol(format!("remote report: {other:?}"))),
                }
                report.outcome
            }
        };
        if outcome.status == OutcomeStatus::Completed {
            if let Some(o) = &outcome.output {
                collected.push(o.clone());
            }
        }
        r.status = Some(outcome.status);
        r.mismatch = outcome.mismatch;
        ops.push(r);
    }

    let decision = tasks::task_decision(ops.iter().filter_map(|o| o.decision));
    let denied = decision == Some(EnforcementDecision::Deny);
    let run = TaskRun {
        task_id: task.id.clone(),
        endpoint: endpoint.map(|e| e.id.clone()),
        repeat,
        decision,
        expected: task.expected,
        ops,
        executor_invocations: stack.executor.presentations() - presented_before,
        endpoint_frames: stack.endpoint_frames() - frames_before,
    };
    let timing = PhaseTiming {
        task_id: task.id.clone(),
        endpoint: run.endpoint.clone(),
        mode: Mode::Protected,
        denied,
        authorize_us: micros(auth),
        execute_us: micros(exec),
        complete_us: micros(comp),
        total_us: micros(auth + exec + comp),
    };
    Ok(Timed { run, timing })
}

fn run_protected(cfg: &RunConfig, tasks: &[TaskSpec]) -> Result<SuiteReport, HarnessError> {
    let stack = Stack::spawn(cfg)?;
    let mut report = empty_report(cfg);
    let plan = variants(tasks, &cfg.endpoints);
    let mut local_presented = 0u64;
    let mut remote_sent = 0u64;

    for repeat in 0..cfg.repeats.max(1) {
        let results: Vec<Result<Timed, HarnessError>> = if cfg.parallel {
            std::thread::scope(|s| {
                let handles: Vec<_> = plan
                    .iter()
                    .map(|(task, ep)| {
                        let stack = &stack;
                        s.spawn(move || {
                            let mut w = stack.worker()?;
                            run_protected_task(stack, &mut w, task, *ep, repeat)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(HarnessError::Protocol("task thread panicked".into())))
                    })
                    .collect()
            })
        } else {
            let mut w = stack.worker()?;
            plan.iter()
                .map(|(task, ep)| run_protected_task(&stack, &mut w, task, *ep, repeat))
                .collect()
        };
        for r in results {
            let Timed { run, timing } = r?;
            for o in run.ops.iter().filter(|o| o.grant_id.is_some()) {
                if o.endpoint.is_some() {
                    remote_sent += 1;
                } else {
                    local_presented += 1;
                }
            }
            report.samples.push(timing);
            report.runs.push(run);
        }
    }

    let mut w = stack.worker()?;
    if cfg.inject != Injection::None {
        let summary = inject::run_campaign(&stack, &mut w, cfg, &report.runs)?;
        report.expectations.push(Expectation::new(
            format!("injection {}", cfg.inject.as_str()),
            summary.all_rejected(),
            format!(
                "{}/{} rejected, {} side effects",
                summary.rejected, summary.total, summary.side_effects
            ),
        ));
        report.injection = Some(summary);
    }

    let records = fetch_evidence(&mut w)?;
    annotate_evidence(&mut report.runs, &records);
    report.timings = latency::median_timings(&report.samples);
    check_protected(cfg, &mut report, &records, local_presented, remote_sent, &stack);

    let verification = match call(&mut w.plane, &PlaneRequest::VerifyEvidence)? {
        PlaneResponse::Verification { report } => report,
        other => return Err(HarnessError::Protocol(format!("verify: {other:?}"))),
    };
    report.expectations.push(Expectation::new(
        "evidence-chain",
        verification.valid && verification.lifecycle_violations.is_empty() && verification.open_lifecycles.is_empty(),
        format!(
            "{} records, valid={}, {} lifecycle violations, {} open",
            verification.records,
            verification.valid,
            verification.lifecycle_violations.len(),
            verification.open_lifecycles.len()
        ),
    ));
    report.evidence = Some(verification);
    report.evidence_path = Some(
        cfg.evidence_path
            .clone()
            .unwrap_or_else(|| cfg.state_dir().join("evidence.jsonl"))
            .display()
            .to_string(),
    );
    Ok(report)
}

fn annotate_evidence(runs: &mut [TaskRun], records: &[EvidenceRecord]) {
    let by_key = lifecycles(records);
    for op in runs.iter_mut().flat_map(|r| r.ops.iter_mut()) {
        if let (Some(sid), Some(seq)) = (&op.sid, op.seq) {
            op.evidence_res = by_key
                .get(&(sid.clone(), seq))
                .and_then(|recs| recs.last())
                .map(|r| r.res);
        }
    }
}

/// Whether an op's evidence lifecycle matches what the harness observed.
fn lifecycle_matches(op: &OpResult, records: Option<&Vec<&EvidenceRecord>>) -> bool {
    let Some(recs) = records else { return false };
    let (Some(first), Some(last)) = (recs.first(), recs.last()) else {
        return false;
    };
    if first.dec != op.decision || !last.res.is_terminal() {
        return false;
    }
    match (op.grant_id.is_some(), op.status) {
        (false, _) => last.res == ResultStatus::Denied,
        (true, Some(s)) => {
            last.res
                == match s {
                    OutcomeStatus::Completed => ResultStatus::Completed,
                    OutcomeStatus::Failed => ResultStatus::Failed,
                    OutcomeStatus::Rejected => ResultStatus::Rejected,
                    OutcomeStatus::Inconsistent => ResultStatus::Inconsistent,
                }
        }
        (true, None) => false,
    }
}

fn check_protected(
    cfg: &RunConfig,
    report: &mut SuiteReport,
    records: &[EvidenceRecord],
    local_presented: u64,
    remote_sent: u64,
    stack: &Stack,
) {
    let default_policy = cfg.policy.digest() == Policy::default().digest();
    let mut by_variant: BTreeMap<String, Vec<&TaskRun>> = BTreeMap::new();
    for r in &report.runs {
        by_variant.entry(r.label()).or_default().push(r);
    }
    let by_key = lifecycles(records);
    let mut deterministic = true;
    for (label, runs) in &by_variant {
        let observed: Vec<_> = runs.iter().map(|r| r.decision).collect();
        deterministic &= observed.windows(2).all(|w| w[0] == w[1])
            && runs.windows(2).all(|w| {
                w[0].ops
                    .iter()
                    .map(|o| (o.decision, o.evidence_res))
                    .collect::<Vec<_>>()
                    == w[1]
                        .ops
                        .iter()
                        .map(|o| (o.decision, o.evidence_res))
                        .collect::<Vec<_>>()
            });
        let expected = runs[0].expected;
        let shown = observed
            .iter()
            .map(|d| d.map(|d| d.label()).unwrap_or("none"))
            .collect::<Vec<_>>()
            .join(",");
        if default_policy {
            report.expectations.push(Expectation::new(
                format!("decision {label}"),
                observed.iter().all(|d| *d == Some(expected)),
                format!("expected {expected}, observed {shown}"),
            ));
        }
        let bad: Vec<String> = runs
            .iter()
            .flat_map(|r| r.ops.iter().map(move |o| (r.repeat, o)))
            .filter(|(_, o)| !lifecycle_matches(o, o.sid.clone().zip(o.seq).and_then(|k| by_key.get(&k))))
            .map(|(rep, o)| format!("#{rep} {} {}", o.act, o.target))
            .collect();
        report.expectations.push(Expectation::new(
            format!("lifecycle {label}"),
            bad.is_empty(),
            if bad.is_empty() {
                "decision record first, terminal result matching the outcome".to_string()
            } else {
                format!("mismatched: {}", bad.join("; "))
            },
        ));
    }
    report.expectations.push(Expectation::new(
        "determinism",
        deterministic,
        "decisions and evidence results identical across repeats",
    ));

    // Pre-execution enforcement for denied runs.
    for r in report
        .runs
        .iter()
        .filter(|r| r.decision == Some(EnforcementDecision::Deny))
    {
        let t = report
            .samples
            .iter()
            .find(|t| t.task_id == r.task_id && t.endpoint == r.endpoint)
            .expect("sample per run");
        let untouched = cfg.parallel || (r.executor_invocations == 0 && r.endpoint_frames == 0);
        if r.repeat == 0 {
            report.expectations.push(Expectation::new(
                format!("pre-execution {}", r.label()),
                untouched && t.execute_us == 0 && t.complete_us == 0 && t.authorize_us > 0,
                format!(
                    "executor invocations {}, endpoint frames {}, execute {}us, complete {}us",
                    r.executor_invocations, r.endpoint_frames, t.execute_us, t.complete_us
                ),
            ));
        }
    }
    if cfg.inject == Injection::None {
        // With no injection every presentation and frame comes from a granted op.
        report.expectations.push(Expectation::new(
            "invocations",
            stack.executor.presentations() == local_presented && stack.endpoint_frames() == remote_sent,
            format!(
                "executor {}/{} presentations, endpoints {}/{} frames",
                stack.executor.presentations(),
                local_presented,
                stack.endpoint_frames(),
                remote_sent
            ),
        ));
    }
}

/// Checks each op's evidence lifecycle against what the harness saw.
pub fn lifecycle_report(runs: &[TaskRun], records: &[EvidenceRecord]) -> Vec<(String, bool)> {
    let by_key = &lifecycles(records);
    runs.iter()
        .flat_map(|r| {
            r.ops.iter().map(move |o| {
                let recs = o.sid.clone().zip(o.seq).and_then(|k| by_key.get(&k));
                (
                    format!("{} {} {}", r.label(), o.act, o.target),
                    lifecycle_matches(o, recs),
                )
            })
        })
        .collect()
}

pub fn read_report(path: &Path) -> io::Result<SuiteReport> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}
