//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents are incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An id or label fell outside its valid range.
    #[error("index out of range in {op}: {value} >= {bound}")]
    Index {
        op: &'static str,
        value: usize,
        bound: usize,
    },

    /// An operation was called outside its contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A module path did not resolve.
    #[error("module path {path:?} not found (longest resolvable prefix: {prefix:?})")]
    PathNotFound { path: String, prefix: String },

    /// A pattern string failed to parse.
    #[error("invalid pattern {pattern:?}: {detail}")]
    Pattern { pattern: String, detail: String },

    /// A pattern resolved to zero modules where at least one match is required.
    #[error("pattern {0:?} matched no modules")]
    EmptyMatch(String),

    /// A merge failed inside a wrapped forward.
    #[error("routing error at {path:?} ({route}): {detail}")]
    Routing {
        path: String,
        route: &'static str,
        detail: String,
    },

    /// Uninstall was asked for a delta that is not installed.
    #[error("delta is not installed on module {0:?}")]
    NotAttached(String),

    /// Attach/detach called in the wrong state.
    #[error("invalid state: {0}")]
    State(String),

    /// A capture target never executed during the pseudo forward pass.
    #[error("shape capture failed: module {0:?} was never executed during the pseudo forward")]
    Capture(String),

    /// Invalid configuration (model extents, delta hyperparameters, CLI flags).
    #[error("config error: {0}")]
    Config(String),

    /// A delta type was placed on a module it cannot operate on.
    #[error("placement error: {0}")]
    Placement(String),

    /// Snapshot keys did not line up with the target model.
    #[error("snapshot key error: {0}")]
    Key(String),

    /// A checkpoint file is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error at {path:?}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
