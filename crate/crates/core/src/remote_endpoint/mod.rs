//! Terminal-side verification agent.
//!
//! The endpoint accepts plane-sealed envelopes over the framed channel,
//! checks them with its own key, runs the command against its own fixture
//! tree and returns a MACed report.

use std::fs;
use std::io;
use std::net::ToSocketAddrs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical::{sha256_hex, to_canonical_bytes_without};
use crate::clock::{Clock, SystemClock};
use crate::constrained_executor::{ExecutionOutcome, Mismatch, MismatchCode, Sandbox};
use crate::crypto::ChannelKey;
use crate::risk_model::{Action, ObjectRef};
use crate::trusted_plane::AuthorizationGrant;
use crate::wire::{FrameClient, FrameServer, WireError};

pub const ENVELOPE_VERSION: u32 = 1;

/// Action, object and write content, mirroring a local scoped action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommandSpec {
    pub act: Action,
    pub obj: ObjectRef,
    pub content: Option<String>,
}

impl CommandSpec {
    pub fn content_digest(&self) -> Option<String> {
        self.content.as_ref().map(|c| sha256_hex(c.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteCommandEnvelope {
    pub v: u32,
    pub endpoint_id: String,
    pub grant: AuthorizationGrant,
    pub command_spec: CommandSpec,
    pub channel_seq: u64,
    pub issued_at_ms: i64,
    pub envelope_mac: String,
}

impl RemoteCommandEnvelope {
    pub fn mac_input(&self) -> Vec<u8> {
        to_canonical_bytes_without(self, "envelope_mac").expect("no floats")
    }

    pub fn seal(mut self, key: &ChannelKey) -> Self {
        self.envelope_mac = key.mac_hex(&self.mac_input());
        self
    }
}

/// Endpoint-to-plane result, MACed with the endpoint key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointReport {
    pub v: u32,
    pub endpoint_id: String,
    pub channel_seq: u64,
    pub grant_id: String,
    pub outcome: ExecutionOutcome,
    pub mac: String,
}

impl EndpointReport {
    pub fn new(
        endpoint_id: &str,
        channel_seq: u64,
        grant_id: &str,
        outcome: ExecutionOutcome,
        key: &ChannelKey,
    ) -> Self {
        let mut r = Self {
            v: ENVELOPE_VERSION,
            endpoint_id: endpoint_id.to_string(),
            channel_seq,
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

/// Endpoint identity, key and replay high-water mark, kept in a JSON file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointKeyring {
    pub endpoint_id: String,
    pub key: ChannelKey,
    pub last_channel_seq: u64,
}

impl EndpointKeyring {
    pub fn new(endpoint_id: impl Into<String>, key: ChannelKey) -> Self {
        Self {
            endpoint_id: endpoint_id.into(),
            key,
            last_channel_seq: 0,
        }
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    /// Write-then-rename so the high-water mark is never torn.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerificationProfile {
    FastVerify,
    SlowSetup,
}

impl VerificationProfile {
    pub fn default_delay(self) -> Duration {
        match self {
            VerificationProfile::FastVerify => Duration::from_millis(20),
            VerificationProfile::SlowSetup => Duration::from_millis(80),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VerificationProfile::FastVerify => "fast-verify",
            VerificationProfile::SlowSetup => "slow-setup",
        }
    }
}

impl FromStr for VerificationProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fast-verify" => Ok(VerificationProfile::FastVerify),
            "slow-setup" => Ok(VerificationProfile::SlowSetup),
            other => Err(format!("unknown verification profile `{other}`")),
        }
    }
}

/// Checks envelope authenticity. Implementations model the cost of the
/// terminal's isolated verification environment.
pub trait VerificationBackend: Send + Sync {
    fn name(&self) -> &str;
    fn verify_mac(&self, key: &ChannelKey, message: &[u8], tag_hex: &str) -> bool;
}

/// HMAC check preceded by a fixed artificial delay.
#[derive(Debug, Clone)]
pub struct StubBackend {
    pub profile: VerificationProfile,
    pub delay: Duration,
}

impl StubBackend {
    pub fn new(profile: VerificationProfile) -> Self {
        Self {
            profile,
            delay: profile.default_delay(),
        }
    }
}

impl VerificationBackend for StubBackend {
    fn name(&self) -> &str {
        self.profile.as_str()
    }

    fn verify_mac(&self, key: &ChannelKey, message: &[u8], tag_hex: &str) -> bool {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        key.verify_hex(message, tag_hex)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub endpoint_id: String,
    pub keyring_path: PathBuf,
    pub fixture_root: PathBuf,
    pub profile: VerificationProfile,
    pub verify_delay_ms: Option<u64>,
    /// Accept unauthenticated direct commands (baseline measurements only).
    #[serde(default)]
    pub allow_direct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EndpointRequest {
    Envelope { envelope: Value },
    Direct { command: CommandSpec },
}

#[derive(Debug, thiserror::Error)]
pub enum EndpointError {
    #[error("endpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("keyring belongs to `{found}`, expected `{expected}`")]
    KeyringIdentity { expected: String, found: String },
}

pub struct RemoteEndpoint {
    endpoint_id: String,
    keyring: Mutex<EndpointKeyring>,
    keyring_path: Option<PathBuf>,
    sandbox: Sandbox,
    backend: Box<dyn VerificationBackend>,
    clock: Arc<dyn Clock>,
    allow_direct: bool,
    received_frames: AtomicU64,
    received_bytes: AtomicU64,
    executed: AtomicU64,
}

impl std::fmt::Debug for RemoteEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEndpoint")
            .field("endpoint_id", &self.endpoint_id)
            .field("backend", &self.backend.name())
            .finish_non_exhaustive()
    }
}

impl RemoteEndpoint {
    pub fn from_config(config: &EndpointConfig) -> Result<Self, EndpointError> {
        let keyring = EndpointKeyring::load(&config.keyring_path)?;
        if keyring.endpoint_id != config.endpoint_id {
            return Err(EndpointError::KeyringIdentity {
                expected: config.endpoint_id.clone(),
                found: keyring.endpoint_id,
            });
        }
        let mut backend = StubBackend::new(config.profile);
        if let Some(ms) = config.verify_delay_ms {
            backend.delay = Duration::from_millis(ms);
        }
        let mut ep = Self::new(keyring, &config.fixture_root, Box::new(backend))?;
        ep.keyring_path = Some(config.keyring_path.clone());
        ep.allow_direct = config.allow_direct;
        Ok(ep)
    }

    pub fn new(
        keyring: EndpointKeyring,
        fixture_root: &Path,
        backend: Box<dyn VerificationBackend>,
    ) -> Result<Self, EndpointError> {
        Ok(Self {
            endpoint_id: keyring.endpoint_id.clone(),
            keyring: Mutex::new(keyring),
            keyring_path: None,
            sandbox: Sandbox::new(fixture_root)?,
            backend,
            clock: Arc::new(SystemClock),
            allow_direct: false,
            received_frames: AtomicU64::new(0),
            received_bytes: AtomicU64::new(0),
            executed: AtomicU64::new(0),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn allowing_direct(mut self, allow: bool) -> Self {
        self.allow_direct = allow;
        self
    }

    pub fn endpoint_id(&self) -> &str {
        &self.endpoint_id
    }

    pub fn profile_name(&self) -> &str {
        self.backend.name()
    }

    pub fn received_frames(&self) -> u64 {
        self.received_frames.load(Ordering::SeqCst)
    }

    pub fn received_bytes(&self) -> u64 {
        self.received_bytes.load(Ordering::SeqCst)
    }

    /// Commands actually run against the fixture tree.
    pub fn executed(&self) -> u64 {
        self.executed.load(Ordering::SeqCst)
    }

    pub fn last_channel_seq(&self) -> u64 {
        self.keyring.lock().unwrap_or_else(|p| p.into_inner()).last_channel_seq
    }

    /// MAC, identity, channel freshness, grant expiry, then command versus
    /// grant scope. Advances the channel high-water mark on success.
    pub fn verify_remote_command(
        &self,
        envelope: &RemoteCommandEnvelope,
    ) -> Result<crate::constrained_executor::Plan, Mismatch> {
        let mut kr = self.keyring.lock().unwrap_or_else(|p| p.into_inner());
        if !self
            .backend
            .verify_mac(&kr.key, &envelope.mac_input(), &envelope.envelope_mac)
        {
            return Err(Mismatch::new(MismatchCode::BadMac, "envelope MAC does not verify"));
        }
        if envelope.v != ENVELOPE_VERSION {
            return Err(Mismatch::new(
                MismatchCode::Malformed,
                format!("unsupported envelope v{}", envelope.v),
            ));
        }
        if envelope.endpoint_id != self.endpoint_id {
            return Err(Mismatch::new(
                MismatchCode::WrongEndpoint,
                format!("envelope addressed to {}", envelope.endpoint_id),
            ));
        }
        if envelope.channel_seq <= kr.last_channel_seq {
            return Err(Mismatch::new(
                MismatchCode::ChannelReplay,
                format!("channel_seq {} <= {}", envelope.channel_seq, kr.last_channel_seq),
            ));
        }
        let g = &envelope.grant;
        if g.is_expired(self.clock.now_ms()) {
            return Err(Mismatch::new(MismatchCode::Expired, "grant has expired"));
        }
        let cmd = &envelope.command_spec;
        if cmd.act != g.act {
            return Err(Mismatch::new(
                MismatchCode::ActionMismatch,
                "command action differs from grant",
            ));
        }
        if cmd.obj != g.obj {
            return Err(Mismatch::new(
                MismatchCode::ObjectMismatch,
                "command object differs from grant",
            ));
        }
        if g.approved_scope.endpoint.as_deref() != Some(self.endpoint_id.as_str()) {
            return Err(Mismatch::new(
                MismatchCode::ScopeViolation,
                "grant is not scoped to this endpoint",
            ));
        }
        let plan = self
            .sandbox
            .plan(cmd.act, &cmd.obj, cmd.content.as_deref(), &g.approved_scope, &[])?;
        kr.last_channel_seq = envelope.channel_seq;
        if let Some(p) = &self.keyring_path {
            kr.save(p)
                .map_err(|e| Mismatch::new(MismatchCode::Malformed, format!("cannot persist channel_seq: {e}")))?;
        }
        Ok(plan)
    }

    /// Verifies, executes and signs the result.
    pub fn execute_and_return(&self, envelope: &RemoteCommandEnvelope) -> EndpointReport {
        let outcome = match self.verify_remote_command(envelope) {
            Ok(plan) => {
                self.executed.fetch_add(1, Ordering::SeqCst);
                self.sandbox.perform(&plan, &envelope.grant.grant_id)
            }
            Err(m) => ExecutionOutcome::from_mismatch(&m),
        };
        self.sign(envelope.channel_seq, &envelope.grant.grant_id, outcome)
    }

    fn sign(&self, channel_seq: u64, grant_id: &str, outcome: ExecutionOutcome) -> EndpointReport {
        let kr = self.keyring.lock().unwrap_or_else(|p| p.into_inner());
        EndpointReport::new(&self.endpoint_id, channel_seq, grant_id, outcome, &kr.key)
    }

    /// Unverified execution for baseline measurements.
    pub fn execute_direct(&self, command: &CommandSpec) -> ExecutionOutcome {
        if !self.allow_direct {
            return ExecutionOutcome::from_mismatch(&Mismatch::new(
                MismatchCode::Malformed,
                "direct execution disabled",
            ));
        }
        match self
            .sandbox
            .plan_direct(command.act, &command.obj, command.content.as_deref())
        {
            Ok(plan) => {
                self.executed.fetch_add(1, Ordering::SeqCst);
                self.sandbox.perform(&plan, "direct")
            }
            Err(m) => ExecutionOutcome::from_mismatch(&m),
        }
    }

    /// Handles one raw frame from the channel.
    pub fn handle_frame(&self, payload: &[u8]) -> Value {
        self.received_frames.fetch_add(1, Ordering::SeqCst);
        self.received_bytes
            .fetch_add(payload.len() as u64 + 4, Ordering::SeqCst);
        let reply = match serde_json::from_slice::<EndpointRequest>(payload) {
            Ok(EndpointRequest::Envelope { envelope }) => {
                match serde_json::from_value::<RemoteCommandEnvelope>(envelope.clone()) {
                    Ok(env) => serde_json::to_value(self.execute_and_return(&env)),
                    Err(e) => {
                        let grant_id = envelope
                            .pointer("/grant/grant_id")
                            .and_then(Value::as_str)
                            .unwrap_or_default();
                        let seq = envelope.get("channel_seq").and_then(Value::as_u64).unwrap_or(0);
                        let m = Mismatch::new(MismatchCode::Malformed, e.to_string());
                        serde_json::to_value(self.sign(seq, grant_id, ExecutionOutcome::from_mismatch(&m)))
                    }
                }
            }
            Ok(EndpointRequest::Direct { command }) => serde_json::to_value(self.execute_direct(&command)),
            Err(e) => serde_json::to_value(ExecutionOutcome::from_mismatch(&Mismatch::new(
                MismatchCode::Malformed,
                e.to_string(),
            ))),
        };
        reply.expect("reports serialize")
    }

    pub fn serve<A: ToSocketAddrs>(self: &Arc<Self>, addr: A) -> Result<FrameServer, WireError> {
        let ep = Arc::clone(self);
        FrameServer::spawn(addr, move |payload: &[u8]| ep.handle_frame(payload))
    }
}

/// REE-side proxy that carries envelopes to an endpoint.
#[derive(Debug)]
pub struct EndpointClient {
    client: FrameClient,
}

impl EndpointClient {
    pub fn connect<A: ToSocketAddrs>(addr: A, timeout: Duration) -> Result<Self, WireError> {
        let client = FrameClient::connect(addr)?;
        client.set_timeout(Some(timeout))?;
        Ok(Self { client })
    }

    pub fn send_envelope(&mut self, envelope: &RemoteCommandEnvelope) -> Result<EndpointReport, WireError> {
        self.send_raw_envelope(serde_json::to_value(envelope)?)
    }

    /// Sends an envelope as an arbitrary JSON value, e.g. after tampering.
    pub fn send_raw_envelope(&mut self, envelope: Value) -> Result<EndpointReport, WireError> {
        self.client.call(&EndpointRequest::Envelope { envelope })
    }

    pub fn send_direct(&mut self, command: &CommandSpec) -> Result<ExecutionOutcome, WireError> {
        self.client.call(&EndpointRequest::Direct {
            command: command.clone(),
        })
    }
}

#[cfg(test)]
mod tests;
