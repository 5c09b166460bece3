//! REE-side request building.
//!
//! The dispatcher never classifies anything. It wraps each captured operation
//! into a [`TrustedOperationRequest`] carrying the session binding, a fresh
//! sequence number and a proposed lifetime, MACs it with the session key and
//! hands it to the plane.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::canonical::{sha256_hex, to_canonical_bytes};
use crate::crypto::ChannelKey;
use crate::logical_path::{self, PathError};
use crate::protocol::{PlaneRequest, PlaneResponse, PlaneTransport, TransportError};
use crate::risk_model::{Action, ContextDescriptor, ObjectRef, SecurityLevel};

pub const DEFAULT_TTL_MS: u64 = 30_000;

#[derive(Debug, thiserror::Error)]
pub enum RequestError {
    #[error("subject must be non-empty")]
    EmptySubject,
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("plane unreachable: {0}")]
    PlaneUnreachable(#[from] TransportError),
    #[error("unexpected plane response: {0}")]
    Protocol(String),
    #[error("invalid scope: {0}")]
    InvalidScope(String),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Requested operational boundary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScopeSpec {
    /// Logical path prefixes.
    pub paths: Vec<String>,
    /// Command templates.
    pub commands: Vec<String>,
    /// Remote endpoint the operation is bound to, if any.
    pub endpoint: Option<String>,
}

impl ScopeSpec {
    pub fn paths<I: IntoIterator<Item = S>, S: Into<String>>(paths: I) -> Self {
        Self {
            paths: paths.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn with_commands<I: IntoIterator<Item = S>, S: Into<String>>(mut self, cmds: I) -> Self {
        self.commands = cmds.into_iter().map(Into::into).collect();
        self
    }

    pub fn on_endpoint(mut self, endpoint: impl Into<String>) -> Self {
        self.endpoint = Some(endpoint.into());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty() && self.commands.is_empty()
    }

    /// Non-empty, absolute normalized paths, parseable templates.
    pub fn validate(&self) -> Result<(), RequestError> {
        if self.is_empty() {
            return Err(RequestError::InvalidScope("scope is empty".into()));
        }
        for p in &self.paths {
            let n = logical_path::normalize(p)?;
            if n != *p {
                return Err(RequestError::InvalidScope(format!("path `{p}` is not normalized")));
            }
        }
        for c in &self.commands {
            c.parse::<crate::command_template::CommandTemplate>()
                .map_err(|e| RequestError::InvalidScope(format!("command `{c}`: {e}")))?;
        }
        if let Some(e) = &self.endpoint {
            if e.is_empty() {
                return Err(RequestError::InvalidScope("empty endpoint id".into()));
            }
        }
        Ok(())
    }

    /// Path-prefix containment and command subset.
    pub fn is_subset_of(&self, other: &ScopeSpec) -> bool {
        self.endpoint == other.endpoint
            && self
                .paths
                .iter()
                .all(|p| other.paths.iter().any(|q| logical_path::is_within(p, q)))
            && self.commands.iter().all(|c| other.commands.contains(c))
    }

    /// Whether a normalized logical path lies inside the scope's paths.
    pub fn covers(&self, path: &str) -> bool {
        self.paths.iter().any(|p| logical_path::is_within(path, p))
    }
}

/// The level field on the wire. The REE always sends `unassessed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AssessedLevel {
    Unassessed,
    Assessed(SecurityLevel),
}

impl Serialize for AssessedLevel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            AssessedLevel::Unassessed => s.serialize_str("unassessed"),
            AssessedLevel::Assessed(l) => l.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for AssessedLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "unassessed" => Ok(AssessedLevel::Unassessed),
            "L0" => Ok(AssessedLevel::Assessed(SecurityLevel::L0)),
            "L1" => Ok(AssessedLevel::Assessed(SecurityLevel::L1)),
            "L2" => Ok(AssessedLevel::Assessed(SecurityLevel::L2)),
            "L3" => Ok(AssessedLevel::Assessed(SecurityLevel::L3)),
            other => Err(serde::de::Error::custom(format!("unknown level `{other}`"))),
        }
    }
}

impl fmt::Display for AssessedLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AssessedLevel::Unassessed => f.write_str("unassessed"),
            AssessedLevel::Assessed(l) => write!(f, "{l}"),
        }
    }
}

/// The normalized request ⟨sid, act, obj, scope, ctx, level, seq, ttl⟩.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustedOperationRequest {
    pub sid: String,
    pub act: Action,
    pub obj: ObjectRef,
    pub scope: ScopeSpec,
    pub ctx: ContextDescriptor,
    pub level: AssessedLevel,
    pub seq: u64,
    /// Lifetime in milliseconds from plane receipt.
    pub ttl: u64,
}

impl TrustedOperationRequest {
    /// Structural checks that do not need session state.
    pub fn validate(&self) -> Result<(), RequestError> {
        if self.sid.is_empty() {
            return Err(RequestError::Malformed("empty sid".into()));
        }
        if self.seq == 0 {
            return Err(RequestError::Malformed("seq must be >= 1".into()));
        }
        self.scope.validate()?;
        let target = &self.obj.target;
        if !logical_path::is_endpoint_designator(target) && logical_path::normalize(target)? != *target {
            return Err(RequestError::Malformed(format!("object `{target}` is not normalized")));
        }
        if let Some(dest) = &self.obj.destination {
            logical_path::normalize(dest)?;
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        canonical_encode(self)
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.canonical_bytes())
    }
}

/// Canonical JSON bytes of a request: the MAC and digest input.
pub fn canonical_encode(request: &TrustedOperationRequest) -> Vec<u8> {
    to_canonical_bytes(request).expect("requests contain no floats")
}

/// REE-side view of an open session.
#[derive(Debug)]
pub struct SessionState {
    pub sid: String,
    pub subject: String,
    next_seq: u64,
    pub session_key_id: String,
    session_key: ChannelKey,
    pub default_ttl_ms: u64,
    closed: bool,
}

impl SessionState {
    /// Opens a session with the plane, which issues the session MAC key.
    pub fn open<T: PlaneTransport + ?Sized>(plane: &mut T, subject: &str) -> Result<Self, RequestError> {
        if subject.trim().is_empty() {
            return Err(RequestError::EmptySubject);
        }
        match plane.call(&PlaneRequest::OpenSession {
            subject: subject.to_string(),
        })? {
            PlaneResponse::SessionOpened {
                sid,
                subject,
                session_key,
                key_id,
                default_ttl_ms,
            } => Ok(Self {
                sid,
                subject,
                next_seq: 1,
                session_key_id: key_id,
                session_key,
                default_ttl_ms,
                closed: false,
            }),
            other => Err(RequestError::Protocol(format!("{other:?}"))),
        }
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Builds the next request, consuming one sequence number.
    pub fn build_request(
        &mut self,
        act: Action,
        obj: ObjectRef,
        scope: ScopeSpec,
        ctx: ContextDescriptor,
    ) -> Result<TrustedOperationRequest, RequestError> {
        self.build_request_with_ttl(act, obj, scope, ctx, self.default_ttl_ms)
    }

    pub fn build_request_with_ttl(
        &mut self,
        act: Action,
        obj: ObjectRef,
        scope: ScopeSpec,
        ctx: ContextDescriptor,
        ttl: u64,
    ) -> Result<TrustedOperationRequest, RequestError> {
        if self.closed {
            return Err(RequestError::SessionClosed(self.sid.clone()));
        }
        let mut obj = obj;
        obj.target = if logical_path::is_endpoint_designator(&obj.target) {
            obj.target
        } else {
            logical_path::normalize(&obj.target)?
        };
        let mut scope = scope;
        scope.paths = scope
            .paths
            .iter()
            .map(|p| logical_path::normalize(p))
            .collect::<Result<_, _>>()?;
        let req = TrustedOperationRequest {
            sid: self.sid.clone(),
            act,
            obj,
            scope,
            ctx,
            level: AssessedLevel::Unassessed,
            seq: self.next_seq,
            ttl,
        };
        self.next_seq += 1;
        Ok(req)
    }

    /// MAC over the canonical request bytes under the session key.
    pub fn seal(&self, request: &TrustedOperationRequest) -> String {
        self.session_key.mac_hex(&canonical_encode(request))
    }

    /// Wraps a request into the plane submission frame.
    pub fn submission(&self, request: &TrustedOperationRequest) -> PlaneRequest {
        PlaneRequest::Submit {
            request: serde_json::to_value(request).expect("serializable"),
            mac: self.seal(request),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk_model::Origin;

    fn sample(target: &str) -> TrustedOperationRequest {
        TrustedOperationRequest {
            sid: "sess-1".into(),
            act: Action::Write,
            obj: ObjectRef::path(target),
            scope: ScopeSpec::paths(["/workspace"]),
            ctx: ContextDescriptor::local(),
            level: AssessedLevel::Unassessed,
            seq: 1,
            ttl: 30_000,
        }
    }

    // Digests frozen from an independent encoder: Python's
    // json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    // followed by hashlib.sha256.
    const SUMMARY_DIGEST: &str = "a8d388abf781aead01f8eb6dd778a06e7d5131f651f11e8e67432beaf58f5979";
    const NOTES_DIGEST: &str = "73c75c1b5392ca9f9504fec2adba0a1fd3f34f642b5827d3bd823a4339c8a701";

    #[test]
    fn canonical_form_is_sorted_and_compact() {
        let bytes = canonical_encode(&sample("/workspace/summary.txt"));
        assert_eq!(
            std::str::from_utf8(&bytes).unwrap(),
            concat!(
                r#"{"act":"write","ctx":{"chained":false,"cross_boundary":false,"network_payload":false,"#,
                r#""origin":"local","task_consistent":true,"user_present":true},"level":"unassessed","#,
                r#""obj":{"argv":[],"destination":null,"payload_sha256":null,"target":"/workspace/summary.txt"},"#,
                r#""scope":{"commands":[],"endpoint":null,"paths":["/workspace"]},"seq":1,"sid":"sess-1","ttl":30000}"#
            )
        );
    }

    #[test]
    fn digests_match_independent_encoder() {
        assert_eq!(sample("/workspace/summary.txt").digest(), SUMMARY_DIGEST);
        assert_eq!(sample("/workspace/notes.md").digest(), NOTES_DIGEST);
    }

    #[test]
    fn field_order_does_not_matter() {
        let a = sample("/workspace/summary.txt");
        let mut v = serde_json::to_value(&a).unwrap();
        // Re-insert fields in reverse order.
        let obj = v.as_object_mut().unwrap();
        let mut pairs: Vec<_> = std::mem::take(obj).into_iter().collect();
        pairs.reverse();
        let rebuilt: serde_json::Map<_, _> = pairs.into_iter().collect();
        let b: TrustedOperationRequest = serde_json::from_value(serde_json::Value::Object(rebuilt)).unwrap();
        assert_eq!(canonical_encode(&a), canonical_encode(&b));
    }

    #[test]
    fn level_wire_format() {
        assert_eq!(
            serde_json::to_string(&AssessedLevel::Unassessed).unwrap(),
            "\"unassessed\""
        );
        let l: AssessedLevel = serde_json::from_str("\"L2\"").unwrap();
        assert_eq!(l, AssessedLevel::Assessed(SecurityLevel::L2));
        assert!(serde_json::from_str::<AssessedLevel>("\"L9\"").is_err());
    }

    #[test]
    fn scope_validation_and_containment() {
        assert!(ScopeSpec::default().validate().is_err());
        assert!(ScopeSpec::paths(["workspace"]).validate().is_err());
        assert!(ScopeSpec::paths(["/workspace/../etc"]).validate().is_err());
        assert!(ScopeSpec::paths(["/workspace"])
            .with_commands(["ls {dir}"])
            .validate()
            .is_err());
        let wide = ScopeSpec::paths(["/workspace"]).with_commands(["ls", "cat {path}"]);
        let narrow = ScopeSpec::paths(["/workspace/docs"]).with_commands(["ls"]);
        assert!(narrow.is_subset_of(&wide));
        assert!(!wide.is_subset_of(&narrow));
        assert!(!narrow.clone().on_endpoint("pi-01").is_subset_of(&wide));
    }

    #[test]
    fn request_validation() {
        let mut r = sample("/workspace/a");
        assert!(r.validate().is_ok());
        r.seq = 0;
        assert!(r.validate().is_err());
        let mut r = sample("/workspace/../a");
        assert!(r.validate().is_err());
        r.obj.target = "endpoint:pi-01".into();
        assert!(r.validate().is_ok());
        let mut r = sample("/workspace/a");
        r.ctx.origin = Origin::Remote;
        assert!(r.validate().is_ok());
    }
}
