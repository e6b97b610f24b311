//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped by
//! the phase in which the failure occurs (configuration, training, attack,
//! evaluation, serialization) so that callers can match on the category
//! without parsing message strings.

/// Errors produced by model construction, training, attacks, and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input (image, token sequence, dataset) violates a documented
    /// precondition.
    #[error("input error: {0}")]
    Input(String),

    /// Training diverged or was handed an unusable corpus.
    #[error("training error: {0}")]
    Training(String),

    /// An attack routine was invoked with inconsistent state.
    #[error("attack error: {0}")]
    Attack(String),

    /// A query reached the black box carrying an image or text that breaks
    /// the attack's own constraints. This always indicates a bug in attack
    /// code, never a recoverable condition, so it is reported loudly.
    #[error("constraint violation: {0}")]
    Constraint(String),

    /// Evaluation could not produce a meaningful report (for example, the
    /// victim model predicted nothing correctly).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// A checkpoint or dataset container failed to parse or validate.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Underlying filesystem failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
