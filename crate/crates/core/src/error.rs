use thiserror::Error;

use crate::state_objects::ObjectId;

/// Failure decoding bytes received from the wire or from a snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated input: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("bad magic 0x{0:04x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },
}

impl DecodeError {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        DecodeError::Invalid { what, detail: detail.into() }
    }
}

/// Errors raised by state objects when building or applying operations.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("object {0} is not registered")]
    UnknownObject(ObjectId),
    #[error("object {0} is already registered")]
    DuplicateObject(ObjectId),
    #[error("object {object} has kind {actual}, expected {expected}")]
    WrongKind { object: ObjectId, expected: &'static str, actual: &'static str },
    #[error("object {0} is not a member of the derivative")]
    NotAMember(ObjectId),
    #[error("operand of {0} bytes exceeds the 64-byte limit")]
    OperandTooLong(usize),
    #[error("operation has {0} operands, limit is 255")]
    TooManyOperands(usize),
    #[error("malformed operation: {0}")]
    MalformedOp(String),
    #[error("log for object {0} is full")]
    Backpressure(ObjectId),
    #[error("instance is not serving traffic")]
    NotServing,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}
