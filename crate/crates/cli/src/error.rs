use std::fmt;

use guirl_core::env::EnvError;
use guirl_core::grpo::GrpoError;
use guirl_core::merge::MergeError;
use guirl_core::params::ParamError;

/// Failure of a subcommand; each variant has its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad config, input file or data (2).
    Config(String),
    /// Gateway or device unreachable (3).
    Connect(String),
    /// Checkpoints that do not fit together or do not fit the policy (4).
    Mismatch(String),
    /// A check the command performs did not pass, or a bug (1).
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Connect(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Connect(m) => write!(f, "connectivity error: {m}"),
            CliError::Mismatch(m) => write!(f, "checkpoint mismatch: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ParamError> for CliError {
    fn from(e: ParamError) -> Self {
        match e {
            ParamError::Mismatch(_) | ParamError::Unknown(_) | ParamError::ShapeData { .. } => {
                CliError::Mismatch(e.to_string())
            }
            ParamError::Format(_) | ParamError::Io(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Transport(_) | EnvError::LeaseExpired | EnvError::Remote(_) => {
                CliError::Connect(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<GrpoError> for CliError {
    fn from(e: GrpoError) -> Self {
        match e {
            GrpoError::Config(_) | GrpoError::Reward(_) | GrpoError::Pool(_) => CliError::Config(e.to_string()),
            GrpoError::Env(e) => e.into(),
            GrpoError::Param(e) => e.into(),
            GrpoError::OldProb(_) | GrpoError::Sink(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::Param(p) => CliError::Mismatch(p.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}
