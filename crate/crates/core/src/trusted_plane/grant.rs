use serde::{Deserialize, Serialize};

use crate::canonical::to_canonical_bytes_without;
use crate::crypto::ChannelKey;
use crate::request_plane::ScopeSpec;
use crate::risk_model::{Action, EnforcementDecision, ObjectRef, SecurityLevel};

pub const GRANT_VERSION: u32 = 1;

/// Decisions that can carry a grant. Denials never do.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GrantDecision {
    #[serde(rename = "d_ree")]
    Ree,
    #[serde(rename = "d_ia")]
    IsolatedAuthorization,
    #[serde(rename = "d_ie")]
    IsolatedExecution,
    /// Granted after a human approved a `d_uc` ticket.
    #[serde(rename = "d_uc-approved")]
    UserApproved,
}

impl GrantDecision {
    pub fn from_decision(d: EnforcementDecision) -> Option<Self> {
        match d {
            EnforcementDecision::Ree => Some(GrantDecision::Ree),
            EnforcementDecision::IsolatedAuthorization => Some(GrantDecision::IsolatedAuthorization),
            EnforcementDecision::IsolatedExecution => Some(GrantDecision::IsolatedExecution),
            EnforcementDecision::UserConfirmation | EnforcementDecision::Deny => None,
        }
    }

    /// The decision as recorded in evidence.
    pub fn evidence_decision(self) -> EnforcementDecision {
        match self {
            GrantDecision::Ree => EnforcementDecision::Ree,
            GrantDecision::IsolatedAuthorization => EnforcementDecision::IsolatedAuthorization,
            GrantDecision::IsolatedExecution => EnforcementDecision::IsolatedExecution,
            GrantDecision::UserApproved => EnforcementDecision::UserConfirmation,
        }
    }
}

/// Single-use, scoped, expiring permission bound to one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthorizationGrant {
    pub v: u32,
    pub grant_id: String,
    pub request_digest: String,
    pub sid: String,
    pub seq: u64,
    pub act: Action,
    pub obj: ObjectRef,
    pub decision: GrantDecision,
    pub level: SecurityLevel,
    pub approved_scope: ScopeSpec,
    /// Plane-clock deadline, unix milliseconds.
    pub expiry_ms: i64,
    pub nonce: String,
    pub mac: String,
}

impl AuthorizationGrant {
    pub fn mac_input(&self) -> Vec<u8> {
        to_canonical_bytes_without(self, "mac").expect("grants contain no floats")
    }

    pub fn sign(mut self, key: &ChannelKey) -> Self {
        self.mac = key.mac_hex(&self.mac_input());
        self
    }

    pub fn verify(&self, key: &ChannelKey) -> bool {
        key.verify_hex(&self.mac_input(), &self.mac)
    }

    pub fn is_expired(&self, now_ms: i64) -> bool {
        now_ms >= self.expiry_ms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::random_nonce_hex;

    fn grant() -> AuthorizationGrant {
        AuthorizationGrant {
            v: GRANT_VERSION,
            grant_id: "g-1".into(),
            request_digest: "ab".repeat(32),
            sid: "s".into(),
            seq: 3,
            act: Action::Write,
            obj: ObjectRef::path("/workspace/summary.txt"),
            decision: GrantDecision::Ree,
            level: SecurityLevel::L0,
            approved_scope: ScopeSpec::paths(["/workspace"]),
            expiry_ms: 1_000,
            nonce: random_nonce_hex(),
            mac: String::new(),
        }
    }

    #[test]
    fn any_field_change_breaks_mac() {
        let key = ChannelKey::generate();
        let g = grant().sign(&key);
        assert!(g.verify(&key));
        assert!(!g.verify(&ChannelKey::generate()));

        let mut h = g.clone();
        h.seq += 1;
        assert!(!h.verify(&key));
        let mut h = g.clone();
        h.approved_scope.paths.push("/etc".into());
        assert!(!h.verify(&key));
        let mut h = g.clone();
        h.decision = GrantDecision::IsolatedAuthorization;
        assert!(!h.verify(&key));
        let mut h = g.clone();
        h.expiry_ms += 1;
        assert!(!h.verify(&key));
    }

    #[test]
    fn decision_labels() {
        assert_eq!(
            serde_json::to_string(&GrantDecision::UserApproved).unwrap(),
            "\"d_uc-approved\""
        );
        assert_eq!(GrantDecision::from_decision(EnforcementDecision::Deny), None);
        assert_eq!(
            GrantDecision::UserApproved.evidence_decision(),
            EnforcementDecision::UserConfirmation
        );
    }
}
