//! Operation-level risk model.
//!
//! An operation instance is the tuple (subject, action, object, context,
//! effect). Four ordinal projections turn it into a [`RiskVector`], an
//! aggregation rule turns the vector into a [`SecurityLevel`], and the
//! decision rule maps the level plus auxiliary policy conditions onto an
//! [`EnforcementDecision`]. Everything here is pure and driven by a validated
//! [`Policy`].

mod assess;
mod policy;

pub use assess::{
    assess, chi_conditions, classify, decide, infer_effect, need_iso, project, psi, Assessment, ChiConditions,
};
pub use policy::{
    Aggregation, ContextLevels, DecisionRules, EffectRule, GrantRules, MandatoryDeny, ObjectRule, OverrideCondition,
    OverrideRule, Policy, PolicyConfig, PolicyError, POLICY_SCHEMA,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RiskError {
    #[error("unknown action `{0}`")]
    UnknownAction(String),
    #[error("no object rule matches `{0}`")]
    UnmatchedObject(String),
    #[error("risk level {0} is outside 0..=3")]
    LevelOutOfRange(u8),
    #[error(transparent)]
    Path(#[from] crate::logical_path::PathError),
}

/// Action categories. Anything outside this set is rejected when parsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Read,
    Write,
    Copy,
    Rename,
    Execute,
    Send,
    Invoke,
    Modify,
    Configure,
}

impl Action {
    pub const ALL: [Action; 9] = [
        Action::Read,
        Action::Write,
        Action::Copy,
        Action::Rename,
        Action::Execute,
        Action::Send,
        Action::Invoke,
        Action::Modify,
        Action::Configure,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Read => "read",
            Action::Write => "write",
            Action::Copy => "copy",
            Action::Rename => "rename",
            Action::Execute => "execute",
            Action::Send => "send",
            Action::Invoke => "invoke",
            Action::Modify => "modify",
            Action::Configure => "configure",
        }
    }

    /// Actions that change persistent state at the target.
    pub fn is_mutating(self) -> bool {
        matches!(
            self,
            Action::Write | Action::Copy | Action::Rename | Action::Modify | Action::Configure
        )
    }

    pub fn is_command(self) -> bool {
        matches!(self, Action::Execute | Action::Invoke)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Action {
    type Err = RiskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| RiskError::UnknownAction(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Public,
    Ordinary,
    Sensitive,
    Critical,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 4] = [
        ObjectClass::Public,
        ObjectClass::Ordinary,
        ObjectClass::Sensitive,
        ObjectClass::Critical,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Effect {
    None,
    OrdinaryModification,
    SensitiveDisclosure,
    IntegrityOrPrivilege,
    Externalization,
}

impl Effect {
    pub const ALL: [Effect; 5] = [
        Effect::None,
        Effect::OrdinaryModification,
        Effect::SensitiveDisclosure,
        Effect::IntegrityOrPrivilege,
        Effect::Externalization,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Local,
    Remote,
    Browser,
    Plugin,
}

/// Situational facts about a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextDescriptor {
    pub origin: Origin,
    pub task_consistent: bool,
    pub user_present: bool,
    pub cross_boundary: bool,
    /// Part of a multi-step chain whose combined effect exceeds any single step.
    pub chained: bool,
    /// Consumes a payload fetched from the network.
    pub network_payload: bool,
}

impl ContextDescriptor {
    pub fn local() -> Self {
        Self {
            origin: Origin::Local,
            task_consistent: true,
            user_present: true,
            cross_boundary: false,
            chained: false,
            network_payload: false,
        }
    }

    pub fn remote() -> Self {
        Self {
            origin: Origin::Remote,
            ..Self::local()
        }
    }
}

/// What an operation targets. `target` is a logical path or endpoint
/// designator; commands carry their argv and run with `target` as working
/// directory; writes bind the digest of the content to be written.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectRef {
    pub target: String,
    pub destination: Option<String>,
    pub argv: Vec<String>,
    pub payload_sha256: Option<String>,
}

impl ObjectRef {
    pub fn path(target: impl Into<String>) -> Self {
        Self {
            target: target.into(),
            destination: None,
            argv: Vec::new(),
            payload_sha256: None,
        }
    }

    pub fn command(cwd: impl Into<String>, argv: &[&str]) -> Self {
        Self {
            argv: argv.iter().map(|s| s.to_string()).collect(),
            ..Self::path(cwd)
        }
    }

    pub fn with_destination(mut self, dest: impl Into<String>) -> Self {
        self.destination = Some(dest.into());
        self
    }

    pub fn with_payload(mut self, content: &[u8]) -> Self {
        self.payload_sha256 = Some(crate::canonical::sha256_hex(content));
        self
    }

    pub fn command_line(&self) -> String {
        self.argv.join(" ")
    }
}

/// An object together with the class the policy assigned to it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetObject {
    pub reference: ObjectRef,
    pub class: ObjectClass,
}

/// The modeled operation ⟨subject, action, object, context, effect⟩.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperationInstance {
    pub subject: String,
    pub action: Action,
    pub object: TargetObject,
    pub context: ContextDescriptor,
    pub effect: Effect,
}

impl OperationInstance {
    /// Builds an instance, classifying the object and inferring the effect
    /// from policy.
    pub fn from_parts(
        subject: impl Into<String>,
        action: Action,
        object: ObjectRef,
        context: ContextDescriptor,
        policy: &Policy,
    ) -> Result<Self, RiskError> {
        let (class, _) = policy.classify_object(&object)?;
        let effect = infer_effect(action, class, &context, policy);
        Ok(Self {
            subject: subject.into(),
            action,
            object: TargetObject {
                reference: object,
                class,
            },
            context,
            effect,
        })
    }
}

/// An ordinal risk value in `0..=3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Ordinal(u8);

impl Ordinal {
    pub const MAX: u8 = 3;

    pub fn get(self) -> u8 {
        self.0
    }
}

impl TryFrom<u8> for Ordinal {
    type Error = RiskError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        if v <= Self::MAX {
            Ok(Self(v))
        } else {
            Err(RiskError::LevelOutOfRange(v))
        }
    }
}

impl From<Ordinal> for u8 {
    fn from(o: Ordinal) -> u8 {
        o.0
    }
}

/// ⟨action, object, context, effect⟩ projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u8; 4]", into = "[u8; 4]")]
pub struct RiskVector {
    pub action: Ordinal,
    pub object: Ordinal,
    pub context: Ordinal,
    pub effect: Ordinal,
}

impl RiskVector {
    pub fn new(action: u8, object: u8, context: u8, effect: u8) -> Result<Self, RiskError> {
        Ok(Self {
            action: action.try_into()?,
            object: object.try_into()?,
            context: context.try_into()?,
            effect: effect.try_into()?,
        })
    }

    pub fn components(&self) -> [u8; 4] {
        [
            self.action.get(),
            self.object.get(),
            self.context.get(),
            self.effect.get(),
        ]
    }

    pub fn score(&self) -> u8 {
        self.components().iter().sum()
    }

    /// Componentwise `<=`.
    pub fn dominated_by(&self, other: &RiskVector) -> bool {
        self.components().iter().zip(other.components()).all(|(a, b)| *a <= b)
    }
}

impl TryFrom<[u8; 4]> for RiskVector {
    type Error = RiskError;

    fn try_from(c: [u8; 4]) -> Result<Self, Self::Error> {
        RiskVector::new(c[0], c[1], c[2], c[3])
    }
}

impl From<RiskVector> for [u8; 4] {
    fn from(v: RiskVector) -> [u8; 4] {
        v.components()
    }
}

impl fmt::Display for RiskVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c, d] = self.components();
        write!(f, "<{a},{b},{c},{d}>")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SecurityLevel {
    L0,
    L1,
    L2,
    L3,
}

impl SecurityLevel {
    pub const ALL: [SecurityLevel; 4] = [
        SecurityLevel::L0,
        SecurityLevel::L1,
        SecurityLevel::L2,
        SecurityLevel::L3,
    ];

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i.min(3)]
    }
}

impl fmt::Display for SecurityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Enforcement outcomes, ordered from weakest to strongest control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EnforcementDecision {
    /// Direct execution on the ordinary path.
    #[serde(rename = "d_ree")]
    Ree,
    /// Isolated authorization with constrained execution.
    #[serde(rename = "d_ia")]
    IsolatedAuthorization,
    /// Isolated execution: an extra dispatch record precedes the grant.
    #[serde(rename = "d_ie")]
    IsolatedExecution,
    /// Isolated execution gated on user confirmation.
    #[serde(rename = "d_uc")]
    UserConfirmation,
    #[serde(rename = "d_deny")]
    Deny,
}

impl EnforcementDecision {
    pub const ALL: [EnforcementDecision; 5] = [
        EnforcementDecision::Ree,
        EnforcementDecision::IsolatedAuthorization,
        EnforcementDecision::IsolatedExecution,
        EnforcementDecision::UserConfirmation,
        EnforcementDecision::Deny,
    ];

    pub fn label(self) -> &'static str {
        match self {
            EnforcementDecision::Ree => "d_ree",
            EnforcementDecision::IsolatedAuthorization => "d_ia",
            EnforcementDecision::IsolatedExecution => "d_ie",
            EnforcementDecision::UserConfirmation => "d_uc",
            EnforcementDecision::Deny => "d_deny",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.label() == s)
    }
}

impl fmt::Display for EnforcementDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}
