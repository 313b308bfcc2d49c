use thiserror::Error;

/// Errors surfaced by the protocol library.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Error {
    /// Multiplicative inverse of zero requested.
    #[error("division by zero in GF(2^m)")]
    DivisionByZero,

    /// Interpolation points were duplicated or zero; the Vandermonde system
    /// has no unique solution.
    #[error("singular system: {0}")]
    SingularSystem(&'static str),

    /// An evaluation point or parameter fell outside [1, L] or the field.
    #[error("out of range: {0}")]
    OutOfRange(&'static str),

    /// A structural precondition of the rekey procedure was violated.
    #[error("protocol error: {0}")]
    ProtocolError(String),

    /// A nonce (scope, epoch) was replayed for key generation.
    #[error("freshness violation: epoch {epoch} already used in scope {scope}")]
    FreshnessViolation { scope: u32, epoch: u64 },

    /// A logic node was given fewer than 2 child seeds.
    #[error("degree violation: logic seed needs 2 or 3 children, got {0}")]
    DegreeViolation(usize),

    /// Authenticated decryption failed (wrong key, wrong epoch, or tamper).
    #[error("authentication failure on sealed key message")]
    AuthFailure,

    /// A membership operation referenced an unknown or duplicate member.
    #[error("membership error: {0}")]
    MembershipError(String),

    /// A scenario or group layout was rejected.
    #[error("config error: {0}")]
    ConfigError(String),

    /// A scenario or trace file could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    /// A subgroup ran out of MDS evaluation points.
    #[error("position space exhausted in subgroup {0}")]
    PositionsExhausted(u32),
}

pub type Result<T> = std::result::Result<T, Error>;
