//! Operation-centric trusted authorization plane for host-acting agents.

pub mod canonical;
pub mod clock;
pub mod command_template;
pub mod constrained_executor;
pub mod crypto;
pub mod logical_path;
pub mod protocol;
pub mod remote_endpoint;
pub mod request_plane;
pub mod risk_model;
pub mod trusted_plane;
pub mod wire;
pub mod workload_harness;
