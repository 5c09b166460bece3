use serde::{Deserialize, Serialize};

use crate::risk_model::SecurityLevel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TicketState {
    Pending,
    Approved,
    Denied,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HumanDecision {
    Approve,
    Deny,
}

impl std::str::FromStr for HumanDecision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "approve" => Ok(HumanDecision::Approve),
            "deny" => Ok(HumanDecision::Deny),
            other => Err(format!("expected approve or deny, got `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmationTicket {
    pub ticket_id: String,
    pub request_digest: String,
    pub sid: String,
    pub seq: u64,
    pub summary: String,
    pub level: SecurityLevel,
    pub created_at: String,
    pub created_at_ms: i64,
    pub expires_at_ms: i64,
    pub state: TicketState,
}

impl ConfirmationTicket {
    pub fn is_pending(&self) -> bool {
        self.state == TicketState::Pending
    }
}
