//! JSON bodies carried by frames.

use guirl_core::action::Action;
use guirl_core::tasks::Task;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcquireReq {
    pub holder: String,
    /// Only devices hosting this app qualify.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acquired {
    pub lease_id: u64,
    pub device_id: String,
    pub heartbeat_interval_ms: u64,
    /// Gateway node that relays traffic for the device.
    pub node: String,
}

/// Body of HEARTBEAT, RELEASE and VERIFY.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeaseReq {
    pub lease_id: u64,
}

/// Body of STEP: either start an episode of `reset` or take `action`
/// (absent for an unparseable turn).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReq {
    pub lease_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reset: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorCode {
    NoDeviceAvailable,
    LeaseExpired,
    UnknownKind,
    Malformed,
    UnexpectedKind,
    BackendUnreachable,
    WrongNode,
    WrongLease,
    Env,
    ShuttingDown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}
