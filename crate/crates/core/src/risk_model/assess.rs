use super::{
    Action, ContextDescriptor, Effect, EnforcementDecision, ObjectClass, OperationInstance, Origin, Policy, RiskError,
    RiskVector, SecurityLevel,
};

/// ⟨α(a), β(r), γ(c), δ(e)⟩ under the policy tables.
pub fn project(instance: &OperationInstance, policy: &Policy) -> Result<RiskVector, RiskError> {
    let (_, object) = policy.classify_object(&instance.object.reference)?;
    Ok(RiskVector {
        action: policy.action_level(instance.action),
        object,
        context: policy.context_level(&instance.context),
        effect: policy.effect_level(instance.effect),
    })
}

/// Aggregates a vector into a level: score thresholds, then override rules,
/// then the remote floor. Every step only raises the level, so the result is
/// monotone in each component.
pub fn classify(vector: &RiskVector, context: &ContextDescriptor, policy: &Policy) -> SecurityLevel {
    let agg = &policy.config().aggregation;
    let score = vector.score();
    let by_score = agg.thresholds.iter().filter(|&&t| score >= t).count();
    let mut level = SecurityLevel::from_index(by_score);

    let [a, b, c, d] = vector.components();
    for rule in &agg.overrides {
        let w = rule.when;
        let holds = [
            (w.action_min, a),
            (w.object_min, b),
            (w.context_min, c),
            (w.effect_min, d),
        ]
        .into_iter()
        .all(|(min, v)| min.is_none_or(|m| v >= m));
        if holds {
            level = level.max(rule.level);
        }
    }

    if context.origin == Origin::Remote {
        level = level.max(policy.config().remote_floor);
    }
    level
}

/// Auxiliary conditions that gate the decision table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChiConditions {
    pub confirmation_channel: bool,
    pub mandatory_protected: bool,
    pub remote_write_blocked: bool,
}

impl ChiConditions {
    /// χ = 1 iff a confirmation channel exists, the object is not mandatorily
    /// protected and no remote write falls outside the allowlist.
    pub fn holds(&self) -> bool {
        self.confirmation_channel && !self.mandatory_protected && !self.remote_write_blocked
    }
}

pub fn chi_conditions(instance: &OperationInstance, policy: &Policy) -> ChiConditions {
    let rules = &policy.config().decisions;
    let obj = &instance.object.reference;
    ChiConditions {
        confirmation_channel: rules.confirmation_channel,
        mandatory_protected: policy.mandatory_protected(obj, instance.object.class),
        remote_write_blocked: instance.context.origin == Origin::Remote
            && instance.action.is_mutating()
            && !policy.remote_write_allowed(obj),
    }
}

/// The level→decision table: L0..L2 from policy, L3 splits on χ.
pub fn psi(level: SecurityLevel, chi: bool, policy: &Policy) -> EnforcementDecision {
    let rules = &policy.config().decisions;
    match level {
        SecurityLevel::L0 => rules.l0,
        SecurityLevel::L1 => rules.l1,
        SecurityLevel::L2 => rules.l2,
        SecurityLevel::L3 if chi => EnforcementDecision::UserConfirmation,
        SecurityLevel::L3 => EnforcementDecision::Deny,
    }
}

/// Enforcement decision for an assessed instance. Mandatory-protected objects
/// and non-allowlisted remote writes are denied at any level.
pub fn decide(level: SecurityLevel, instance: &OperationInstance, policy: &Policy) -> EnforcementDecision {
    let chi = chi_conditions(instance, policy);
    if chi.mandatory_protected || chi.remote_write_blocked {
        return EnforcementDecision::Deny;
    }
    psi(level, chi.holds(), policy)
}

/// Whether a decision leaves the ordinary path.
pub fn need_iso(decision: EnforcementDecision) -> bool {
    decision != EnforcementDecision::Ree
}

/// Effect class from the policy's ordered effect rules, falling back to the
/// per-action default.
pub fn infer_effect(action: Action, class: ObjectClass, context: &ContextDescriptor, policy: &Policy) -> Effect {
    let cfg = policy.config();
    cfg.effect_rules
        .iter()
        .find(|r| {
            r.actions.contains(&action)
                && (r.classes.is_empty() || r.classes.contains(&class))
                && r.cross_boundary.is_none_or(|cb| cb == context.cross_boundary)
        })
        .map(|r| r.effect)
        .unwrap_or(cfg.default_effects[&action])
}

/// Full pipeline result for one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assessment {
    pub vector: RiskVector,
    pub level: SecurityLevel,
    pub decision: EnforcementDecision,
}

pub fn assess(instance: &OperationInstance, policy: &Policy) -> Result<Assessment, RiskError> {
    let vector = project(instance, policy)?;
    let level = classify(&vector, &instance.context, policy);
    let decision = decide(level, instance, policy);
    Ok(Assessment {
        vector,
        level,
        decision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk_model::{ObjectRef, TargetObject};
    use EnforcementDecision::*;
    use SecurityLevel::*;

    fn instance(action: Action, target: ObjectRef, ctx: ContextDescriptor, policy: &Policy) -> OperationInstance {
        OperationInstance::from_parts("s1", action, target, ctx, policy).unwrap()
    }

    fn v(a: u8, b: u8, c: u8, d: u8) -> RiskVector {
        RiskVector::new(a, b, c, d).unwrap()
    }

    fn suspicious() -> ContextDescriptor {
        ContextDescriptor {
            origin: Origin::Browser,
            task_consistent: false,
            ..ContextDescriptor::local()
        }
    }

    /// Policy variant where the running example's L3 branch can reach the
    /// confirmation path.
    fn confirmable() -> Policy {
        Policy::default()
            .with(|c| c.decisions.mandatory_deny.object_classes.clear())
            .unwrap()
    }

    #[test]
    fn projects_running_example_write_to_workspace() {
        let p = Policy::default();
        let o1 = instance(
            Action::Write,
            ObjectRef::path("/workspace/summary.txt"),
            ContextDescriptor::local(),
            &p,
        );
        assert_eq!(o1.effect, Effect::OrdinaryModification);
        assert_eq!(project(&o1, &p).unwrap(), v(1, 1, 0, 1));
        assert_eq!(classify(&v(1, 1, 0, 1), &o1.context, &p), L0);
        assert_eq!(decide(L0, &o1, &p), Ree);
    }

    #[test]
    fn projects_running_example_write_to_passwd() {
        let p = Policy::default();
        let o2 = instance(Action::Write, ObjectRef::path("/etc/passwd"), suspicious(), &p);
        assert_eq!(o2.effect, Effect::IntegrityOrPrivilege);
        assert_eq!(project(&o2, &p).unwrap(), v(1, 3, 2, 3));
        assert_eq!(classify(&v(1, 3, 2, 3), &o2.context, &p), L3);
        // Default policy: /etc/passwd is mandatorily protected, so χ = 0.
        assert_eq!(decide(L3, &o2, &p), Deny);
        let q = confirmable();
        let o2 = instance(Action::Write, ObjectRef::path("/etc/passwd"), suspicious(), &q);
        assert!(chi_conditions(&o2, &q).holds());
        assert_eq!(decide(L3, &o2, &q), UserConfirmation);
        let r = q.with(|c| c.decisions.confirmation_channel = false).unwrap();
        assert_eq!(decide(L3, &o2, &r), Deny);
    }

    #[test]
    fn public_read_is_all_minimum() {
        let p = Policy::default();
        let o = instance(
            Action::Read,
            ObjectRef::path("/etc/os-release"),
            ContextDescriptor::local(),
            &p,
        );
        assert_eq!(o.effect, Effect::None);
        assert_eq!(project(&o, &p).unwrap(), v(0, 0, 0, 0));
        assert_eq!(classify(&v(0, 0, 0, 0), &o.context, &p), L0);
    }

    #[test]
    fn workspace_grep_is_l1_isolated_authorization() {
        let p = Policy::default();
        let o = instance(
            Action::Execute,
            ObjectRef::command("/workspace", &["grep", "-R", "deprecated", "docs/"]),
            ContextDescriptor::local(),
            &p,
        );
        assert_eq!(project(&o, &p).unwrap(), v(2, 1, 0, 1));
        assert_eq!(classify(&v(2, 1, 0, 1), &o.context, &p), L1);
        assert_eq!(decide(L1, &o, &p), IsolatedAuthorization);
    }

    #[test]
    fn remote_floor_lifts_remote_context() {
        let p = Policy::default();
        assert_eq!(classify(&v(0, 0, 1, 0), &ContextDescriptor::remote(), &p), L1);
        assert_eq!(classify(&v(0, 0, 1, 0), &ContextDescriptor::local(), &p), L0);
    }

    #[test]
    fn remote_write_outside_allowlist_is_denied_at_any_level() {
        let p = Policy::default();
        let o = instance(
            Action::Write,
            ObjectRef::path("~/.bashrc"),
            ContextDescriptor::remote(),
            &p,
        );
        for level in SecurityLevel::ALL {
            assert_eq!(decide(level, &o, &p), Deny);
        }
        let q = p
            .with(|c| c.decisions.remote_write_allowlist = vec!["~/.bashrc".into()])
            .unwrap();
        let o = instance(
            Action::Write,
            ObjectRef::path("~/.bashrc"),
            ContextDescriptor::remote(),
            &q,
        );
        assert_eq!(decide(L2, &o, &q), IsolatedExecution);
    }

    #[test]
    fn remote_read_is_not_a_remote_write() {
        let p = Policy::default();
        let o = instance(
            Action::Read,
            ObjectRef::path("/etc/os-release"),
            ContextDescriptor::remote(),
            &p,
        );
        let a = assess(&o, &p).unwrap();
        assert_eq!(a.vector, v(0, 0, 1, 0));
        assert_eq!(a.level, L1);
        assert_eq!(a.decision, IsolatedAuthorization);
    }

    #[test]
    fn effect_inference_table() {
        let p = Policy::default();
        let local = ContextDescriptor::local();
        let crossing = ContextDescriptor {
            cross_boundary: true,
            ..local
        };
        assert_eq!(
            infer_effect(Action::Write, ObjectClass::Critical, &local, &p),
            Effect::IntegrityOrPrivilege
        );
        assert_eq!(
            infer_effect(Action::Read, ObjectClass::Public, &local, &p),
            Effect::None
        );
        assert_eq!(
            infer_effect(Action::Send, ObjectClass::Critical, &crossing, &p),
            Effect::Externalization
        );
        assert_eq!(
            infer_effect(Action::Send, ObjectClass::Critical, &local, &p),
            Effect::SensitiveDisclosure
        );
        assert_eq!(
            infer_effect(Action::Read, ObjectClass::Sensitive, &local, &p),
            Effect::SensitiveDisclosure
        );
        assert_eq!(
            infer_effect(Action::Write, ObjectClass::Ordinary, &local, &p),
            Effect::OrdinaryModification
        );
    }

    #[test]
    fn psi_matches_level_table_for_both_chi_values() {
        let p = Policy::default();
        let expected = [
            (L0, true, Ree),
            (L0, false, Ree),
            (L1, true, IsolatedAuthorization),
            (L1, false, IsolatedAuthorization),
            (L2, true, IsolatedExecution),
            (L2, false, IsolatedExecution),
            (L3, true, UserConfirmation),
            (L3, false, Deny),
        ];
        for (level, chi, d) in expected {
            assert_eq!(psi(level, chi, &p), d, "{level} chi={chi}");
        }
    }

    #[test]
    fn need_iso_is_false_only_for_ree() {
        let falses: Vec<_> = EnforcementDecision::ALL.into_iter().filter(|d| !need_iso(*d)).collect();
        assert_eq!(falses, vec![Ree]);
    }

    #[test]
    fn subject_does_not_influence_assessment() {
        let p = Policy::default();
        let mut a = instance(
            Action::Write,
            ObjectRef::path("/workspace/x"),
            ContextDescriptor::local(),
            &p,
        );
        let r1 = assess(&a, &p).unwrap();
        a.subject = "someone-else".into();
        assert_eq!(assess(&a, &p).unwrap(), r1);
    }

    #[test]
    fn hand_built_instance_uses_policy_beta() {
        // β comes from the object rules, not from the carried class tag.
        let p = Policy::default();
        let o = OperationInstance {
            subject: "s".into(),
            action: Action::Read,
            object: TargetObject {
                reference: ObjectRef::path("/etc/shadow"),
                class: ObjectClass::Public,
            },
            context: ContextDescriptor::local(),
            effect: Effect::None,
        };
        assert_eq!(project(&o, &p).unwrap().object.get(), 3);
    }
}
