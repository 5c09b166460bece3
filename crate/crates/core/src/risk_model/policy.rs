//! Policy document and its validated, compiled form.

use std::collections::BTreeMap;
use std::path::Path;

use globset::{Glob, GlobBuilder, GlobMatcher, GlobSet, GlobSetBuilder};
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    Action, ContextDescriptor, Effect, EnforcementDecision, ObjectClass, ObjectRef, Ordinal, Origin, RiskError,
    SecurityLevel,
};
use crate::canonical::{sha256_hex, to_canonical_bytes};
use crate::command_template::CommandTemplate;
use crate::logical_path;

pub const POLICY_SCHEMA: &str = "opgate.policy/1";

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid policy{}: {message}", location_suffix(*line, *column))]
    Invalid {
        line: Option<usize>,
        column: Option<usize>,
        message: String,
    },
    #[error("cannot read policy file: {0}")]
    Io(#[from] std::io::Error),
}

fn location_suffix(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l}, column {c}"),
        _ => String::new(),
    }
}

impl PolicyError {
    pub fn line(&self) -> Option<usize> {
        match self {
            PolicyError::Syntax { line, .. } => Some(*line),
            PolicyError::Invalid { line, .. } => *line,
            PolicyError::Io(_) => None,
        }
    }
}

/// One β entry: the first rule whose pattern matches an object wins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRule {
    pub pattern: String,
    pub class: ObjectClass,
    pub level: u8,
}

/// γ buckets, evaluated from the most to the least severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextLevels {
    pub local_consistent: u8,
    pub remote_or_inconsistent: u8,
    pub boundary_crossing: u8,
    pub chained: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectRule {
    pub actions: Vec<Action>,
    /// Empty means any class.
    pub classes: Vec<ObjectClass>,
    pub cross_boundary: Option<bool>,
    pub effect: Effect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverrideCondition {
    pub action_min: Option<u8>,
    pub object_min: Option<u8>,
    pub context_min: Option<u8>,
    pub effect_min: Option<u8>,
}

/// Raises the level to `level` when every stated minimum is met.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverrideRule {
    pub when: OverrideCondition,
    pub level: SecurityLevel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregation {
    /// Minimum score for L1, L2 and L3 respectively.
    pub thresholds: [u8; 3],
    pub overrides: Vec<OverrideRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MandatoryDeny {
    pub object_classes: Vec<ObjectClass>,
    pub object_patterns: Vec<String>,
    /// Regular expressions matched against the space-joined argv.
    pub command_patterns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRules {
    pub l0: EnforcementDecision,
    pub l1: EnforcementDecision,
    pub l2: EnforcementDecision,
    pub confirmation_channel: bool,
    pub mandatory_deny: MandatoryDeny,
    pub remote_write_allowlist: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantRules {
    pub max_ttl_ms: u64,
    /// Logical prefixes a grant scope may cover.
    pub scope_roots: Vec<String>,
    /// Command templates a grant may approve.
    pub command_templates: Vec<String>,
}

/// The policy document as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub schema: String,
    pub action_levels: BTreeMap<Action, u8>,
    pub object_rules: Vec<ObjectRule>,
    pub context_levels: ContextLevels,
    pub effect_levels: BTreeMap<Effect, u8>,
    pub effect_rules: Vec<EffectRule>,
    pub default_effects: BTreeMap<Action, Effect>,
    pub aggregation: Aggregation,
    pub decisions: DecisionRules,
    pub remote_floor: SecurityLevel,
    pub grants: GrantRules,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        use Action::*;
        use ObjectClass::*;

        let rule = |pattern: &str, class, level| ObjectRule {
            pattern: pattern.to_string(),
            class,
            level,
        };
        let strs = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();

        PolicyConfig {
            schema: POLICY_SCHEMA.to_string(),
            action_levels: [
                (Read, 0),
                (Write, 1),
                (Copy, 1),
                (Rename, 1),
                (Execute, 2),
                (Invoke, 2),
                (Configure, 2),
                (Modify, 2),
                (Send, 3),
            ]
            .into_iter()
            .collect(),
            object_rules: vec![
                rule("/etc/passwd", Critical, 3),
                rule("/etc/shadow", Critical, 3),
                rule("/etc/sudoers", Critical, 3),
                rule("/etc/ssh", Critical, 3),
                rule("/etc/ssh/**", Critical, 3),
                rule("/etc/systemd/system/**", Critical, 3),
                rule("~/.ssh", Critical, 3),
                rule("~/.ssh/**", Critical, 3),
                rule("~/.bashrc", Sensitive, 2),
                rule("~/.profile", Sensitive, 2),
                rule("~/.*", Sensitive, 2),
                rule("/etc/os-release", Public, 0),
                rule("/proc/**", Public, 0),
                rule("/workspace/**", Ordinary, 1),
                rule("/workspace", Ordinary, 1),
                rule("/etc/**", Sensitive, 2),
                rule("**", Ordinary, 1),
            ],
            context_levels: ContextLevels {
                local_consistent: 0,
                remote_or_inconsistent: 1,
                boundary_crossing: 2,
                chained: 3,
            },
            effect_levels: [
                (Effect::None, 0),
                (Effect::OrdinaryModification, 1),
                (Effect::SensitiveDisclosure, 2),
                (Effect::IntegrityOrPrivilege, 3),
                (Effect::Externalization, 3),
            ]
            .into_iter()
            .collect(),
            effect_rules: vec![
                EffectRule {
                    actions: vec![Write, Copy, Rename, Modify, Configure, Execute, Invoke],
                    classes: vec![Critical],
                    cross_boundary: None,
                    effect: Effect::IntegrityOrPrivilege,
                },
                EffectRule {
                    actions: vec![Send],
                    classes: vec![Sensitive, Critical],
                    cross_boundary: Some(true),
                    effect: Effect::Externalization,
                },
                EffectRule {
                    actions: vec![Read, Send],
                    classes: vec![Sensitive, Critical],
                    cross_boundary: None,
                    effect: Effect::SensitiveDisclosure,
                },
                EffectRule {
                    actions: vec![Send],
                    classes: vec![Public],
                    cross_boundary: None,
                    effect: Effect::None,
                },
            ],
            default_effects: [
                (Read, Effect::None),
                (Write, Effect::OrdinaryModification),
                (Copy, Effect::OrdinaryModification),
                (Rename, Effect::OrdinaryModification),
                (Modify, Effect::OrdinaryModification),
                (Configure, Effect::OrdinaryModification),
                (Execute, Effect::OrdinaryModification),
                (Invoke, Effect::OrdinaryModification),
                (Send, Effect::SensitiveDisclosure),
            ]
            .into_iter()
            .collect(),
            aggregation: Aggregation {
                thresholds: [4, 6, 8],
                overrides: vec![
                    OverrideRule {
                        when: OverrideCondition {
                            action_min: Some(1),
                            object_min: Some(3),
                            ..Default::default()
                        },
                        level: SecurityLevel::L3,
                    },
                    OverrideRule {
                        when: OverrideCondition {
                            effect_min: Some(3),
                            ..Default::default()
                        },
                        level: SecurityLevel::L3,
                    },
                ],
            },
            decisions: DecisionRules {
                l0: EnforcementDecision::Ree,
                l1: EnforcementDecision::IsolatedAuthorization,
                l2: EnforcementDecision::IsolatedExecution,
                confirmation_channel: true,
                mandatory_deny: MandatoryDeny {
                    object_classes: vec![Critical],
                    object_patterns: vec![],
                    command_patterns: strs(&[
                        r"\b(curl|wget)\b.*\|\s*(ba|da|z|k)?sh\b",
                        r"\b(curl|wget)\b.*\|\s*(python3?|perl|ruby)\b",
                        r"\b(ba|da|z)?sh\s+-c\b",
                    ]),
                },
                remote_write_allowlist: vec![],
            },
            remote_floor: SecurityLevel::L1,
            grants: GrantRules {
                max_ttl_ms: 300_000,
                scope_roots: strs(&["/workspace", "/etc/os-release", "/proc", "/tmp"]),
                command_templates: strs(&[
                    "ls",
                    "ls {path...}",
                    "grep -R {arg} {path...}",
                    "grep -n {arg} {path}",
                    "grep {arg} {path}",
                    "find {path...} -type f",
                    "head -n {int} {path}",
                    "sort {path}",
                    "cat {path}",
                    "uname -a",
                    "df -h",
                ]),
            },
        }
    }
}

/// A validated policy with its patterns compiled.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    object_matchers: Vec<GlobMatcher>,
    deny_objects: GlobSet,
    deny_commands: Vec<Regex>,
    remote_write_allow: GlobSet,
    scope_roots: Vec<String>,
    command_templates: Vec<CommandTemplate>,
    digest: String,
}

impl Default for Policy {
    fn default() -> Self {
        Policy::from_config(PolicyConfig::default()).expect("built-in policy is valid")
    }
}

fn glob(pattern: &str) -> Result<Glob, globset::Error> {
    GlobBuilder::new(pattern).literal_separator(true).build()
}

impl Policy {
    pub fn from_config(config: PolicyConfig) -> Result<Self, PolicyError> {
        validate_and_compile(config, None)
    }

    /// Parses and validates a JSON policy document. Errors carry the line of
    /// the offending entry when it can be located in `source`.
    pub fn from_json_str(source: &str) -> Result<Self, PolicyError> {
        let config: PolicyConfig = serde_json::from_str(source).map_err(|e| PolicyError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        validate_and_compile(config, Some(source))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    /// SHA-256 of the canonical policy document.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn action_level(&self, action: Action) -> Ordinal {
        let v = self.config.action_levels[&action];
        Ordinal::try_from(v).expect("validated")
    }

    pub fn effect_level(&self, effect: Effect) -> Ordinal {
        Ordinal::try_from(self.config.effect_levels[&effect]).expect("validated")
    }

    /// First matching rule for one logical path or designator.
    pub fn object_rule_for(&self, target: &str) -> Result<&ObjectRule, RiskError> {
        let normalized = logical_path::normalize(target)?;
        self.object_matchers
            .iter()
            .position(|m| m.is_match(&normalized))
            .map(|i| &self.config.object_rules[i])
            .ok_or(RiskError::UnmatchedObject(normalized))
    }

    /// Class and β level of an object: the most critical of its target and
    /// destination.
    pub fn classify_object(&self, object: &ObjectRef) -> Result<(ObjectClass, Ordinal), RiskError> {
        let mut best = self.object_rule_for(&object.target)?;
        if let Some(dest) = &object.destination {
            let d = self.object_rule_for(dest)?;
            if (d.level, d.class) > (best.level, best.class) {
                best = d;
            }
        }
        Ok((best.class, Ordinal::try_from(best.level).expect("validated")))
    }

    pub fn context_level(&self, ctx: &ContextDescriptor) -> Ordinal {
        let l = &self.config.context_levels;
        let v = if ctx.chained || ctx.network_payload {
            l.chained
        } else if matches!(ctx.origin, Origin::Browser | Origin::Plugin) || ctx.cross_boundary {
            l.boundary_crossing
        } else if ctx.origin == Origin::Remote || !ctx.task_consistent {
            l.remote_or_inconsistent
        } else {
            l.local_consistent
        };
        Ordinal::try_from(v).expect("validated")
    }

    /// True when the object or command falls under the mandatory-protected
    /// denylist.
    pub fn mandatory_protected(&self, object: &ObjectRef, class: ObjectClass) -> bool {
        let deny = &self.config.decisions.mandatory_deny;
        if deny.object_classes.contains(&class) {
            return true;
        }
        let paths = std::iter::once(&object.target).chain(object.destination.iter());
        for p in paths {
            if let Ok(n) = logical_path::normalize(p) {
                if self.deny_objects.is_match(&n) {
                    return true;
                }
            }
        }
        if !object.argv.is_empty() {
            let line = object.command_line();
            return self.deny_commands.iter().any(|re| re.is_match(&line));
        }
        false
    }

    pub fn remote_write_allowed(&self, object: &ObjectRef) -> bool {
        let paths = std::iter::once(&object.target).chain(object.destination.iter());
        let mut all = true;
        for p in paths {
            all &= logical_path::normalize(p)
                .map(|n| self.remote_write_allow.is_match(&n))
                .unwrap_or(false);
        }
        all
    }

    pub fn scope_roots(&self) -> &[String] {
        &self.scope_roots
    }

    pub fn command_templates(&self) -> &[CommandTemplate] {
        &self.command_templates
    }

    pub fn max_ttl_ms(&self) -> u64 {
        self.config.grants.max_ttl_ms
    }

    pub fn to_canonical_json(&self) -> Vec<u8> {
        to_canonical_bytes(&self.config).expect("policy has no floats")
    }

    /// Returns a copy with the given mutation applied and revalidated.
    pub fn with(&self, f: impl FnOnce(&mut PolicyConfig)) -> Result<Self, PolicyError> {
        let mut c = self.config.clone();
        f(&mut c);
        Policy::from_config(c)
    }
}

struct Locator<'a>(Option<&'a str>);

impl Locator<'_> {
    fn err(&self, needle: Option<&str>, message: String) -> PolicyError {
        let pos = match (self.0, needle) {
            (Some(src), Some(needle)) => locate(src, needle),
            _ => None,
        };
        PolicyError::Invalid {
            line: pos.map(|p| p.0),
            column: pos.map(|p| p.1),
            message,
        }
    }
}

/// 1-based line and column of the first occurrence of `needle` as a JSON
/// string literal (or bare key) in `src`.
fn locate(src: &str, needle: &str) -> Option<(usize, usize)> {
    let quoted = serde_json::to_string(needle).ok()?;
    let at = src.find(&quoted).or_else(|| src.find(needle))?;
    let before = &src[..at];
    let line = before.matches('\n').count() + 1;
    let column = at - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    Some((line, column))
}

fn validate_and_compile(config: PolicyConfig, source: Option<&str>) -> Result<Policy, PolicyError> {
    let loc = Locator(source);

    if config.schema != POLICY_SCHEMA {
        return Err(loc.err(
            Some("schema"),
            format!("unsupported schema `{}` (expected `{POLICY_SCHEMA}`)", config.schema),
        ));
    }

    for action in Action::ALL {
        match config.action_levels.get(&action) {
            None => return Err(loc.err(Some("action_levels"), format!("action_levels is missing `{action}`"))),
            Some(&v) if v > Ordinal::MAX => {
                return Err(loc.err(
                    Some(action.as_str()),
                    format!("action level {v} for `{action}` is outside 0..=3"),
                ))
            }
            _ => {}
        }
        if !config.default_effects.contains_key(&action) {
            return Err(loc.err(
                Some("default_effects"),
                format!("default_effects is missing `{action}`"),
            ));
        }
    }
    for effect in Effect::ALL {
        match config.effect_levels.get(&effect) {
            None => return Err(loc.err(Some("effect_levels"), format!("effect_levels is missing `{effect:?}`"))),
            Some(&v) if v > Ordinal::MAX => {
                return Err(loc.err(Some("effect_levels"), format!("effect level {v} is outside 0..=3")))
            }
            _ => {}
        }
    }
    let c = &config.context_levels;
    for v in [
        c.local_consistent,
        c.remote_or_inconsistent,
        c.boundary_crossing,
        c.chained,
    ] {
        if v > Ordinal::MAX {
            return Err(loc.err(Some("context_levels"), format!("context level {v} is outside 0..=3")));
        }
    }

    let mut object_matchers = Vec::with_capacity(config.object_rules.len());
    let mut has_catch_all = false;
    for rule in &config.object_rules {
        if rule.level > Ordinal::MAX {
            return Err(loc.err(
                Some(&rule.pattern),
                format!("object rule `{}` has level {} outside 0..=3", rule.pattern, rule.level),
            ));
        }
        let g = glob(&rule.pattern).map_err(|e| loc.err(Some(&rule.pattern), format!("bad object pattern: {e}")))?;
        has_catch_all |= rule.pattern == "**";
        object_matchers.push(g.compile_matcher());
    }
    if !has_catch_all {
        return Err(loc.err(
            Some("object_rules"),
            "object_rules needs a catch-all `**` entry".to_string(),
        ));
    }

    let [t1, t2, t3] = config.aggregation.thresholds;
    if !(1 <= t1 && t1 < t2 && t2 < t3 && t3 <= 4 * Ordinal::MAX) {
        return Err(loc.err(
            Some("thresholds"),
            format!("aggregation thresholds {t1},{t2},{t3} must be strictly increasing within 1..=12"),
        ));
    }
    for o in &config.aggregation.overrides {
        let w = o.when;
        let mins = [w.action_min, w.object_min, w.context_min, w.effect_min];
        if mins.iter().all(Option::is_none) {
            return Err(loc.err(Some("overrides"), "override rule has no condition".to_string()));
        }
        if mins.iter().flatten().any(|&m| m > Ordinal::MAX) {
            return Err(loc.err(Some("overrides"), "override minimum outside 0..=3".to_string()));
        }
    }

    let deny = &config.decisions.mandatory_deny;
    let mut deny_objects = GlobSetBuilder::new();
    for p in &deny.object_patterns {
        deny_objects.add(glob(p).map_err(|e| loc.err(Some(p), format!("bad denylist pattern: {e}")))?);
    }
    let deny_objects = deny_objects.build().map_err(|e| loc.err(None, e.to_string()))?;
    let deny_commands = deny
        .command_patterns
        .iter()
        .map(|p| Regex::new(p).map_err(|e| loc.err(Some(p), format!("bad command denylist pattern: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;

    let mut allow = GlobSetBuilder::new();
    for p in &config.decisions.remote_write_allowlist {
        allow.add(glob(p).map_err(|e| loc.err(Some(p), format!("bad allowlist pattern: {e}")))?);
    }
    let remote_write_allow = allow.build().map_err(|e| loc.err(None, e.to_string()))?;

    if config.grants.max_ttl_ms == 0 {
        return Err(loc.err(Some("max_ttl_ms"), "max_ttl_ms must be positive".to_string()));
    }
    let scope_roots = config
        .grants
        .scope_roots
        .iter()
        .map(|r| logical_path::normalize(r).map_err(|e| loc.err(Some(r), format!("bad scope root: {e}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let command_templates = config
        .grants
        .command_templates
        .iter()
        .map(|t| {
            t.parse::<CommandTemplate>()
                .map_err(|e| loc.err(Some(t), format!("bad command template: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let digest = sha256_hex(&to_canonical_bytes(&config).expect("policy has no floats"));
    Ok(Policy {
        config,
        object_matchers,
        deny_objects,
        deny_commands,
        remote_write_allow,
        scope_roots,
        command_templates,
        digest,
    })
}
