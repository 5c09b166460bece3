//! Messages exchanged with the trusted plane over the REE channel.
//!
//! Every message is one canonical-JSON frame tagged by `type`.

use std::net::ToSocketAddrs;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::constrained_executor::ExecutorReport;
use crate::crypto::ChannelKey;
use crate::remote_endpoint::{CommandSpec, EndpointReport, RemoteCommandEnvelope};
use crate::trusted_plane::{AuthorizationGrant, ConfirmationTicket, EvidenceRecord, HumanDecision, VerificationReport};
use crate::wire::{FrameClient, WireError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlaneRequest {
    OpenSession {
        subject: String,
    },
    /// `request` stays untyped so malformed submissions can still be logged.
    Submit {
        request: Value,
        mac: String,
    },
    Report {
        report: ExecutorReport,
    },
    RemoteReport {
        report: EndpointReport,
    },
    Seal {
        grant_id: String,
        command: CommandSpec,
        endpoint_id: String,
    },
    TicketStatus {
        ticket_id: String,
    },
    Confirm {
        ticket_id: String,
        decision: HumanDecision,
    },
    Pending,
    /// Closes every pending lifecycle whose deadline has passed.
    Sweep,
    Evidence {
        after: Option<u64>,
    },
    VerifyEvidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneErrorCode {
    StaleSeq,
    ExpiredTtl,
    UnknownSession,
    MalformedRequest,
    BadRequestMac,
    UnknownGrant,
    AlreadyClosed,
    AlreadyResolved,
    TicketExpired,
    UnknownTicket,
    UnknownEndpoint,
    ScopeMismatch,
    BadReport,
    AlreadyDispatched,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlaneResponse {
    SessionOpened {
        sid: String,
        subject: String,
        session_key: ChannelKey,
        key_id: String,
        default_ttl_ms: u64,
    },
    Granted {
        grant: AuthorizationGrant,
    },
    ConfirmationPending {
        ticket: ConfirmationTicket,
    },
    Denied {
        request_digest: String,
        reason: String,
    },
    Closed {
        record: Box<EvidenceRecord>,
    },
    Sealed {
        envelope: Box<RemoteCommandEnvelope>,
    },
    Ticket {
        ticket: ConfirmationTicket,
        grant: Option<AuthorizationGrant>,
    },
    PendingTickets {
        tickets: Vec<ConfirmationTicket>,
    },
    Swept {
        closed: usize,
    },
    Evidence {
        records: Vec<EvidenceRecord>,
    },
    Verification {
        report: VerificationReport,
    },
    Error {
        code: PlaneErrorCode,
        message: String,
    },
}

impl PlaneResponse {
    pub fn error_code(&self) -> Option<PlaneErrorCode> {
        match self {
            PlaneResponse::Error { code, .. } => Some(*code),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("plane is not reachable")]
    Unreachable,
}

/// Anything that can carry a plane request and return its response.
pub trait PlaneTransport {
    fn call(&mut self, request: &PlaneRequest) -> Result<PlaneResponse, TransportError>;
}

/// Plane client over a framed socket.
#[derive(Debug)]
pub struct RemotePlane {
    client: FrameClient,
}

impl RemotePlane {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self, TransportError> {
        Ok(Self {
            client: FrameClient::connect(addr)?,
        })
    }
}

impl PlaneTransport for RemotePlane {
    fn call(&mut self, request: &PlaneRequest) -> Result<PlaneResponse, TransportError> {
        Ok(self.client.call(request)?)
    }
}
