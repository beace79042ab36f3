use thiserror::Error;

use crate::model::SampleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("step {step} outside schedule covering [0, {total})")]
    OutOfRange { step: u64, total: u64 },

    #[error("unknown or unsupported axis `{0}`")]
    UnknownAxis(String),

    #[error("sample {0} is bound to more than one constructor")]
    DuplicateBinding(SampleId),

    #[error("sample {0} not found")]
    NotFound(SampleId),

    #[error("lineage graph contains a cycle")]
    Cycle,

    #[error("sample {sample} cannot move from {from} to {to}")]
    StateRegression {
        sample: SampleId,
        from: &'static str,
        to: &'static str,
    },

    #[error("incomplete plan: {0}")]
    IncompletePlan(String),

    #[error("batch shape violation: {0}")]
    BatchShape(String),

    #[error("insufficient capacity for source {source_id}: {reason}")]
    Capacity { source_id: u32, reason: String },

    #[error("integrity failure: {0}")]
    Integrity(String),

    #[error("loader {0} did not answer within the timeout")]
    LoaderTimeout(u32),

    #[error("sample {sample} has {len} tokens, above the maximum sequence length {max}")]
    SequenceTooLong { sample: SampleId, len: usize, max: usize },

    #[error("unknown rank {0}")]
    UnknownRank(u32),

    #[error("mailbox full ({0} messages)")]
    MailboxFull(usize),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: String, reason: String },

    #[error("storage: {0}")]
    Storage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_)
            | Error::InvalidInput(_)
            | Error::UnknownAxis(_)
            | Error::OutOfRange { .. } => 2,
            Error::Capacity { .. } => 3,
            Error::Integrity(_)
            | Error::CorruptCheckpoint { .. }
            | Error::DuplicateBinding(_)
            | Error::IncompletePlan(_) => 4,
            _ => 1,
        }
    }
}
