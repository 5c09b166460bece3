//! Fault injection against granted operations: tampered, replayed,
//! broadened and dropped grants and envelopes.

use std::collections::BTreeMap;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tasks::{builtin_tasks, OpSpec, Payload};
use super::{
    authorize, call, fetch_evidence, lifecycles, scoped_action, seal, Authz, EndpointSpec, HarnessError, RunConfig,
    Stack, TaskRun, Worker,
};
use crate::constrained_executor::{Ack, ExecutionOutcome, MismatchCode, ScopedAction};
use crate::protocol::{PlaneErrorCode, PlaneRequest, PlaneResponse};
use crate::remote_endpoint::{CommandSpec, RemoteCommandEnvelope};
use crate::request_plane::{SessionState, TrustedOperationRequest};
use crate::risk_model::{Action, ObjectRef};
use crate::trusted_plane::{AuthorizationGrant, ResultStatus};

const INJECT_TTL_MS: u64 = 2_000;
const DROP_TTL_MS: u64 = 150;
const SWEEP_MARGIN_MS: i64 = 100;
const MUTATION_ATTEMPTS: usize = 256;
const INJECTED_SUMMARY: &str = "injected summary\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injection {
    None,
    Tamper,
    Replay,
    Broaden,
    Drop,
}

impl Injection {
    pub fn as_str(self) -> &'static str {
        match self {
            Injection::None => "none",
            Injection::Tamper => "tamper",
            Injection::Replay => "replay",
            Injection::Broaden => "broaden",
            Injection::Drop => "drop",
        }
    }
}

impl std::str::FromStr for Injection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Injection::None),
            "tamper" => Ok(Injection::Tamper),
            "replay" => Ok(Injection::Replay),
            "broaden" => Ok(Injection::Broaden),
            "drop" => Ok(Injection::Drop),
            other => Err(format!("unknown injection `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionVerdict {
    pub index: usize,
    pub task_id: String,
    pub op: usize,
    pub endpoint: Option<String>,
    pub variant: String,
    /// What the executor, endpoint or plane answered.
    pub observed: String,
    pub rejected: bool,
    pub side_effect: bool,
    pub sid: String,
    pub seq: u64,
    pub expected_res: Option<ResultStatus>,
    pub evidence_res: Option<ResultStatus>,
    #[serde(skip)]
    observed_ok: bool,
    #[serde(skip)]
    expiry_ms: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSummary {
    pub mode: Injection,
    pub seed: u64,
    pub total: usize,
    pub rejected: usize,
    pub side_effects: usize,
    pub verdicts: Vec<InjectionVerdict>,
}

impl InjectionSummary {
    pub fn all_rejected(&self) -> bool {
        self.total >= 100 && self.rejected == self.total && self.side_effects == 0
    }
}

struct Target {
    task_id: String,
    op_index: usize,
    op: OpSpec,
    endpoint: Option<EndpointSpec>,
}

impl Target {
    fn content(&self) -> Option<String> {
        match &self.op.payload {
            Payload::Summary => Some(INJECTED_SUMMARY.to_string()),
            _ => self.op.content(&[]),
        }
    }
}

fn eligible(runs: &[TaskRun], cfg: &RunConfig) -> Vec<Target> {
    let specs: BTreeMap<String, _> = builtin_tasks().into_iter().map(|t| (t.id.clone(), t)).collect();
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for run in runs {
        let Some(task) = specs.get(&run.task_id) else { continue };
        for (i, r) in run.ops.iter().enumerate() {
            let key = (run.task_id.clone(), i, run.endpoint.clone());
            if r.grant_id.is_none() || seen.contains(&key) {
                continue;
            }
            seen.push(key);
            let op = task.ops[i].clone();
            let endpoint = if op.remote {
                run.endpoint
                    .as_ref()
                    .and_then(|id| cfg.endpoints.iter().find(|e| e.id == *id).cloned())
            } else {
                None
            };
            out.push(Target {
                task_id: run.task_id.clone(),
                op_index: i,
                op,
                endpoint,
            });
        }
    }
    out
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

/// A granted request with what is needed to present it.
struct Authorized {
    req: TrustedOperationRequest,
    grant: AuthorizationGrant,
    content: Option<String>,
}

fn authorize_target(
    stack: &Stack,
    w: &mut Worker,
    session: &mut SessionState,
    t: &Target,
    ttl: u64,
) -> Result<Authorized, HarnessError> {
    let content = t.content();
    let mut obj = t.op.obj.clone();
    if let Some(c) = &content {
        obj = obj.with_payload(c.as_bytes());
    }
    let mut scope = t.op.scope.clone();
    if let Some(ep) = &t.endpoint {
        scope = scope.on_endpoint(&ep.id);
    }
    let req = session
        .build_request_with_ttl(t.op.act, obj, scope, t.op.ctx, ttl)
        .map_err(super::protocol)?;
    match authorize(w, session, &req, stack.confirm)? {
        Authz::Granted(grant, _) => Ok(Authorized {
            req,
            grant: *grant,
            content,
        }),
        Authz::Refused(d, why) => Err(HarnessError::Protocol(format!(
            "{} op {} was granted in the run but now {d}: {why}",
            t.task_id, t.op_index
        ))),
    }
}

fn command_of(a: &Authorized) -> CommandSpec {
    CommandSpec {
        act: a.req.act,
        obj: a.req.obj.clone(),
        content: a.content.clone(),
    }
}

/// Reports a local outcome; an already-closed lifecycle is not an error.
fn report_local(stack: &Stack, w: &mut Worker, grant_id: &str, outcome: ExecutionOutcome) -> Result<(), HarnessError> {
    match stack.executor.report_result(&mut w.plane, grant_id, outcome) {
        Ok(Ack::Closed(_) | Ack::Duplicate) => Ok(()),
        Err(e) => Err(super::protocol(e)),
    }
}

/// Forwards an endpoint report. Returns whether the plane accepted it.
fn report_remote(w: &mut Worker, report: crate::remote_endpoint::EndpointReport) -> Result<bool, HarnessError> {
    Ok(matches!(
        call(&mut w.plane, &PlaneRequest::RemoteReport { report })?,
        PlaneResponse::Closed { .. }
    ))
}

/// Seals, sends and reports a remote command as the harness normally would.
fn complete_remote(stack: &Stack, w: &mut Worker, a: &Authorized, ep: &str) -> Result<(), HarnessError> {
    let live = stack.endpoint(ep);
    let _guard = live.channel.lock().unwrap_or_else(|p| p.into_inner());
    let env = seal(w, &a.grant.grant_id, command_of(a), ep)?
        .map_err(|(c, m)| HarnessError::Protocol(format!("seal refused: {c:?}: {m}")))?;
    let report = w
        .clients
        .get_mut(ep)
        .expect("client")
        .send_envelope(&env)
        .map_err(super::protocol)?;
    report_remote(w, report)?;
    Ok(())
}

fn complete_local(stack: &Stack, w: &mut Worker, a: &Authorized) -> Result<(), HarnessError> {
    let outcome = stack.executor.run(&scoped_action(&a.grant, &a.req, a.content.clone()));
    report_local(stack, w, &a.grant.grant_id, outcome)
}

// ---------------------------------------------------------------- mutation

fn leaf_pointers(v: &Value, prefix: String, out: &mut Vec<String>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let key = k.replace('~', "~0").replace('/', "~1");
                leaf_pointers(child, format!("{prefix}/{key}"), out);
            }
        }
        Value::Array(xs) if !xs.is_empty() => {
            for (i, child) in xs.iter().enumerate() {
                leaf_pointers(child, format!("{prefix}/{i}"), out);
            }
        }
        _ => out.push(prefix),
    }
}

const SWAP_CHARS: &[u8] = b"0123456789abcdefxyz/._-";

fn mutate_leaf(v: &mut Value, rng: &mut StdRng) {
    match v {
        Value::String(s) if !s.is_empty() => {
            let chars: Vec<char> = s.chars().collect();
            let i = rng.random_range(0..chars.len());
            let mut c = chars[i];
            while c == chars[i] {
                c = SWAP_CHARS[rng.random_range(0..SWAP_CHARS.len())] as char;
            }
            *s = chars
                .iter()
                .enumerate()
                .map(|(j, ch)| if j == i { c } else { *ch })
                .collect();
        }
        Value::String(s) => s.push('x'),
        Value::Number(n) => {
            let delta = rng.random_range(1..=1000i64);
            *v = match (n.as_u64(), n.as_i64()) {
                (Some(u), _) => Value::from(u.wrapping_add(delta as u64)),
                (None, Some(i)) => Value::from(i.wrapping_add(delta)),
                _ => Value::from(delta),
            };
        }
        Value::Bool(b) => *b = !*b,
        Value::Null => *v = Value::from("/tmp/injected"),
        Value::Array(xs) => xs.push(Value::from("injected")),
        Value::Object(_) => {}
    }
}

/// Mutates one random leaf until the result still deserializes as `T` and
/// differs from the original.
fn tamper_value<T: serde::de::DeserializeOwned>(original: &Value, rng: &mut StdRng) -> Option<(Value, String)> {
    let mut leaves = Vec::new();
    leaf_pointers(original, String::new(), &mut leaves);
    for _ in 0..MUTATION_ATTEMPTS {
        let ptr = &leaves[rng.random_range(0..leaves.len())];
        let mut v = original.clone();
        mutate_leaf(v.pointer_mut(ptr).expect("leaf exists"), rng);
        if v != *original && serde_json::from_value::<T>(v.clone()).is_ok() {
            return Some((v, ptr.clone()));
        }
    }
    None
}

// --------------------------------------------------------------- campaign

struct Probe {
    variant: String,
    observed: String,
    observed_ok: bool,
    side_effect: bool,
    expected_res: Option<ResultStatus>,
    sid: String,
    seq: u64,
    expiry_ms: i64,
}

fn observed_mismatch(o: &ExecutionOutcome) -> String {
    match o.mismatch {
        Some(m) => format!("{m:?}"),
        None => format!("{:?}", o.status),
    }
}

fn swapped_action(act: Action) -> Action {
    match act {
        Action::Read => Action::Configure,
        _ => Action::Read,
    }
}

fn redirected(obj: &ObjectRef) -> ObjectRef {
    let mut o = obj.clone();
    o.target = if o.target.starts_with("/etc/") {
        "/etc/shadow".into()
    } else {
        "/etc/passwd".into()
    };
    o
}

fn inject_one(
    stack: &Stack,
    w: &mut Worker,
    mode: Injection,
    t: &Target,
    rng: &mut StdRng,
) -> Result<Probe, HarnessError> {
    let mut session = SessionState::open(&mut w.plane, &format!("inject/{}", t.task_id)).map_err(super::protocol)?;
    let ttl = if mode == Injection::Drop {
        DROP_TTL_MS
    } else {
        INJECT_TTL_MS
    };
    let a = authorize_target(stack, w, &mut session, t, ttl)?;
    let mut p = Probe {
        variant: String::new(),
        observed: String::new(),
        observed_ok: false,
        side_effect: false,
        expected_res: None,
        sid: a.req.sid.clone(),
        seq: a.req.seq,
        expiry_ms: a.grant.expiry_ms,
    };
    let performed = stack.executor.performed();
    let executed = stack.endpoint_executions();
    let frames = stack.endpoint_frames();
    let ep = t.endpoint.as_ref().map(|e| e.id.clone());

    match (mode, ep.as_deref()) {
        (Injection::None, _) => unreachable!("campaign runs only with an injection mode"),
        (Injection::Tamper, None) => {
            let original = serde_json::to_value(&a.grant).expect("serializable");
            let (v, ptr) = tamper_value::<AuthorizationGrant>(&original, rng)
                .ok_or_else(|| HarnessError::Protocol("no parseable grant mutation".into()))?;
            let forged: AuthorizationGrant = serde_json::from_value(v).expect("checked");
            let outcome = stack.executor.run(&scoped_action(&forged, &a.req, a.content.clone()));
            p.variant = format!("grant{ptr}");
            p.observed = observed_mismatch(&outcome);
            p.observed_ok = outcome.mismatch == Some(MismatchCode::BadMac);
            p.side_effect = stack.executor.performed() != performed;
            p.expected_res = Some(ResultStatus::Rejected);
            report_local(stack, w, &a.grant.grant_id, outcome)?;
        }
        (Injection::Tamper, Some(ep)) => {
            let live = stack.endpoint(ep);
            let guard = live.channel.lock().unwrap_or_else(|p| p.into_inner());
            let env = seal(w, &a.grant.grant_id, command_of(&a), ep)?
                .map_err(|(c, m)| HarnessError::Protocol(format!("seal refused: {c:?}: {m}")))?;
            let original = serde_json::to_value(&env).expect("serializable");
            let (v, ptr) = tamper_value::<RemoteCommandEnvelope>(&original, rng)
                .ok_or_else(|| HarnessError::Protocol("no parseable envelope mutation".into()))?;
            let report = w
                .clients
                .get_mut(ep)
                .expect("client")
                .send_raw_envelope(v)
                .map_err(super::protocol)?;
            drop(guard);
            p.variant = format!("envelope{ptr}");
            p.observed = observed_mismatch(&report.outcome);
            p.observed_ok = report.outcome.mismatch == Some(MismatchCode::BadMac);
            p.side_effect = stack.endpoint_executions() != executed;
            // A report naming a tampered grant or channel position is refused;
            // the sweep then closes the lifecycle.
            p.expected_res = Some(if report_remote(w, report)? {
                ResultStatus::Rejected
            } else {
                ResultStatus::Failed
            });
        }
        (Injection::Replay, _) if rng.random_bool(0.5) => {
            p.variant = "stale-seq".into();
            let resp = call(&mut w.plane, &session.submission(&a.req))?;
            p.observed = match &resp {
                PlaneResponse::Error { code, .. } => format!("{code:?}"),
                other => format!("{other:?}"),
            };
            p.observed_ok = resp.error_code() == Some(PlaneErrorCode::StaleSeq);
            p.side_effect = matches!(
                resp,
                PlaneResponse::Granted { .. } | PlaneResponse::ConfirmationPending { .. }
            );
            match ep.as_deref() {
                None => complete_local(stack, w, &a)?,
                Some(ep) => complete_remote(stack, w, &a, ep)?,
            }
        }
        (Injection::Replay, None) => {
            p.variant = "grant-replay".into();
            let action = scoped_action(&a.grant, &a.req, a.content.clone());
            let first = stack.executor.run(&action);
            p.expected_res = Some(match first.status {
                crate::constrained_executor::OutcomeStatus::Completed => ResultStatus::Completed,
                crate::constrained_executor::OutcomeStatus::Failed => ResultStatus::Failed,
                crate::constrained_executor::OutcomeStatus::Rejected => ResultStatus::Rejected,
                crate::constrained_executor::OutcomeStatus::Inconsistent => ResultStatus::Inconsistent,
            });
            report_local(stack, w, &a.grant.grant_id, first)?;
            let second = stack.executor.run(&action);
            p.observed = observed_mismatch(&second);
            p.observed_ok = second.mismatch == Some(MismatchCode::Replayed);
            p.side_effect = stack.executor.performed() - performed > 1;
            report_local(stack, w, &a.grant.grant_id, second)?;
        }
        (Injection::Replay, Some(ep)) => {
            p.variant = "envelope-replay".into();
            let live = stack.endpoint(ep);
            let guard = live.channel.lock().unwrap_or_else(|p| p.into_inner());
            let env = seal(w, &a.grant.grant_id, command_of(&a), ep)?
                .map_err(|(c, m)| HarnessError::Protocol(format!("seal refused: {c:?}: {m}")))?;
            let client = w.clients.get_mut(ep).expect("client");
            let first = client.send_envelope(&env).map_err(super::protocol)?;
            let second = client.send_envelope(&env).map_err(super::protocol)?;
            drop(guard);
            p.observed = observed_mismatch(&second.outcome);
            p.observed_ok = second.outcome.mismatch == Some(MismatchCode::ChannelReplay);
            p.side_effect = stack.endpoint_executions() - executed > 1;
            report_remote(w, first)?;
        }
        (Injection::Broaden, None) => {
            let base = scoped_action(&a.grant, &a.req, a.content.clone());
            let (variant, action, want): (&str, ScopedAction, MismatchCode) = match rng.random_range(0..4) {
                0 => (
                    "object-redirect",
                    ScopedAction {
                        obj: redirected(&base.obj),
                        ..base.clone()
                    },
                    MismatchCode::ObjectMismatch,
                ),
                1 => {
                    let mut req = a.req.clone();
                    req.obj = redirected(&req.obj);
                    (
                        "request-rewrite",
                        ScopedAction {
                            obj: req.obj.clone(),
                            request: String::from_utf8(req.canonical_bytes()).expect("utf-8"),
                            ..base.clone()
                        },
                        MismatchCode::DigestMismatch,
                    )
                }
                2 => {
                    // A second, separately authorized instance of the same op.
                    let other = authorize_target(stack, w, &mut session, t, INJECT_TTL_MS)?;
                    let action = ScopedAction {
                        request: String::from_utf8(other.req.canonical_bytes()).expect("utf-8"),
                        ..base.clone()
                    };
                    complete_local(stack, w, &other)?;
                    ("cross-operation", action, MismatchCode::DigestMismatch)
                }
                _ => (
                    "action-swap",
                    ScopedAction {
                        act: swapped_action(base.act),
                        ..base.clone()
                    },
                    MismatchCode::ActionMismatch,
                ),
            };
            let outcome = stack.executor.run(&action);
            p.variant = variant.into();
            p.observed = observed_mismatch(&outcome);
            p.observed_ok = outcome.mismatch == Some(want);
            p.side_effect = stack.executor.performed() - performed > u64::from(variant == "cross-operation");
            p.expected_res = Some(ResultStatus::Inconsistent);
            report_local(stack, w, &a.grant.grant_id, outcome)?;
        }
        (Injection::Broaden, Some(ep)) => {
            let mut cmd = command_of(&a);
            p.variant = if rng.random_bool(0.5) {
                cmd.obj = redirected(&cmd.obj);
                "seal-object".into()
            } else {
                cmd.act = swapped_action(cmd.act);
                "seal-action".into()
            };
            let live = stack.endpoint(ep);
            let _guard = live.channel.lock().unwrap_or_else(|p| p.into_inner());
            match seal(w, &a.grant.grant_id, cmd, ep)? {
                Ok(env) => {
                    p.observed = "sealed".into();
                    // Deliver anyway so the endpoint gets its say.
                    let report = w
                        .clients
                        .get_mut(ep)
                        .expect("client")
                        .send_envelope(&env)
                        .map_err(super::protocol)?;
                    report_remote(w, report)?;
                }
                Err((code, _)) => {
                    p.observed = format!("{code:?}");
                    p.observed_ok = code == PlaneErrorCode::ScopeMismatch;
                }
            }
            p.side_effect = stack.endpoint_frames() != frames;
            p.expected_res = Some(ResultStatus::Inconsistent);
        }
        (Injection::Drop, None) => {
            if t.op.act.is_mutating() {
                p.variant = "drop-dispatch".into();
            } else {
                p.variant = "drop-result".into();
                let _ = stack.executor.run(&scoped_action(&a.grant, &a.req, a.content.clone()));
            }
            p.observed = "no report".into();
            p.observed_ok = true;
            p.side_effect = t.op.act.is_mutating() && stack.executor.performed() != performed;
            p.expected_res = Some(ResultStatus::Failed);
        }
        (Injection::Drop, Some(ep)) => {
            let live = stack.endpoint(ep);
            let _guard = live.channel.lock().unwrap_or_else(|p| p.into_inner());
            let env = seal(w, &a.grant.grant_id, command_of(&a), ep)?
                .map_err(|(c, m)| HarnessError::Protocol(format!("seal refused: {c:?}: {m}")))?;
            if t.op.act.is_mutating() {
                p.variant = "drop-dispatch".into();
            } else {
                p.variant = "drop-result".into();
                let _ = w
                    .clients
                    .get_mut(ep)
                    .expect("client")
                    .send_envelope(&env)
                    .map_err(super::protocol)?;
            }
            p.observed = "no report".into();
            p.observed_ok = true;
            p.side_effect = t.op.act.is_mutating() && stack.endpoint_executions() != executed;
            p.expected_res = Some(ResultStatus::Failed);
        }
    }
    Ok(p)
}

/// Runs `cfg.injections` faults of kind `cfg.inject` against ops that were
/// granted in `runs`, then checks every injected lifecycle in the evidence.
pub(crate) fn run_campaign(
    stack: &Stack,
    w: &mut Worker,
    cfg: &RunConfig,
    runs: &[TaskRun],
) -> Result<InjectionSummary, HarnessError> {
    let targets = eligible(runs, cfg);
    if targets.is_empty() {
        return Err(HarnessError::Protocol("no granted operations to inject into".into()));
    }
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut verdicts = Vec::with_capacity(cfg.injections);
    for index in 0..cfg.injections {
        let t = &targets[rng.random_range(0..targets.len())];
        let p = inject_one(stack, w, cfg.inject, t, &mut rng)?;
        verdicts.push(InjectionVerdict {
            index,
            task_id: t.task_id.clone(),
            op: t.op_index,
            endpoint: t.endpoint.as_ref().map(|e| e.id.clone()),
            variant: p.variant,
            observed: p.observed,
            rejected: false,
            side_effect: p.side_effect,
            sid: p.sid,
            seq: p.seq,
            expected_res: p.expected_res,
            evidence_res: None,
            observed_ok: p.observed_ok,
            expiry_ms: p.expiry_ms,
        });
    }

    let terminal_of = |records: &[crate::trusted_plane::EvidenceRecord], v: &InjectionVerdict| {
        lifecycles(records)
            .get(&(v.sid.clone(), v.seq))
            .and_then(|recs| recs.last())
            .map(|r| r.res)
    };
    let mut records = fetch_evidence(w)?;
    let open: Vec<i64> = verdicts
        .iter()
        .filter(|v| !terminal_of(&records, v).is_some_and(|r| r.is_terminal()))
        .map(|v| v.expiry_ms)
        .collect();
    if let Some(latest) = open.iter().max() {
        let wake = latest + stack.completion_grace_ms as i64 + SWEEP_MARGIN_MS;
        let wait = wake - now_ms();
        if wait > 0 {
            std::thread::sleep(Duration::from_millis(wait as u64));
        }
        call(&mut w.plane, &PlaneRequest::Sweep)?;
        records = fetch_evidence(w)?;
    }
    for v in &mut verdicts {
        v.evidence_res = terminal_of(&records, v);
        let closed = v.evidence_res.is_some_and(|r| r.is_terminal());
        v.rejected = v.observed_ok && closed && v.expected_res.is_none_or(|e| Some(e) == v.evidence_res);
    }
    Ok(InjectionSummary {
        mode: cfg.inject,
        seed: cfg.seed,
        total: verdicts.len(),
        rejected: verdicts.iter().filter(|v| v.rejected).count(),
        side_effects: verdicts.iter().filter(|v| v.side_effect).count(),
        verdicts,
    })
}
