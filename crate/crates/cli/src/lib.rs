//! Library half of the `trellisnet` command-line tool: configuration,
//! checkpoint I/O, and the command implementations. The binary in
//! `main.rs` only parses arguments and maps errors to exit codes.

pub mod checkpoint;
pub mod commands;
pub mod config;

/// Process exit codes shared by every subcommand.
///
/// 0 success · 1 usage/config error · 2 numerical divergence ·
/// 3 verification failure.
#[derive(Debug, thiserror::Error)]
pub enum CmdError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Verification(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Divergence(_) => 2,
            CmdError::Verification(_) => 3,
        }
    }

    pub fn usage(msg: impl Into<String>) -> CmdError {
        CmdError::Usage(msg.into())
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> Self {
        CmdError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CmdError {
    fn from(e: serde_json::Error) -> Self {
        CmdError::Usage(e.to_string())
    }
}

impl From<trellisnet::training::TrainError> for CmdError {
    fn from(e: trellisnet::training::TrainError) -> Self {
        match e {
            trellisnet::training::TrainError::Diverged(msg) => CmdError::Divergence(msg),
            other => CmdError::Usage(other.to_string()),
        }
    }
}

impl From<trellisnet::trellis::TrellisError> for CmdError {
    fn from(e: trellisnet::trellis::TrellisError) -> Self {
        CmdError::Usage(e.to_string())
    }
}

impl From<trellisnet::tensor::TensorError> for CmdError {
    fn from(e: trellisnet::tensor::TensorError) -> Self {
        CmdError::Usage(e.to_string())
    }
}

impl From<trellisnet::equivalence::EquivalenceError> for CmdError {
    fn from(e: trellisnet::equivalence::EquivalenceError) -> Self {
        CmdError::Usage(e.to_string())
    }
}

impl From<trellisnet::data::DataError> for CmdError {
    fn from(e: trellisnet::data::DataError) -> Self {
        CmdError::Usage(e.to_string())
    }
}
