//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("line {line}: unresolved target `{target}`")]
    UnresolvedTarget { line: usize, target: String },
    #[error("line {line}: R13 is reserved and may not appear in programs")]
    ReservedRegister { line: usize },

    #[error("function `{0}` not found")]
    NoSuchFunction(String),
    #[error("function `{fn_name}` takes {arity} inputs, got {given}")]
    ArityMismatch {
        fn_name: String,
        arity: usize,
        given: usize,
    },
    #[error("step budget of {0} exceeded (divergence)")]
    Divergence(u64),
    #[error("call depth exceeded {0} (runaway recursion)")]
    RecursionLimit(usize),

    #[error("function `{fn_name}`: {msg}")]
    Obfuscation { fn_name: String, msg: String },
    #[error("inconsistent routing registers across dispatchers: R{0} vs R{1}")]
    InconsistentRouting(u8, u8),
    #[error("no pre-dispatcher found (no dispatcher with in-degree > 2)")]
    NoPreDispatcher,
    #[error("symbolic engine fault: {0}")]
    EngineFault(String),
    #[error("no successor found within {0} symbolic steps")]
    NoSuccessorFound(u64),
    #[error("no conditional move ahead of the current position")]
    NoCondMove,

    #[error("similarity of two empty graphs is undefined")]
    EmptyGraphs,
    #[error("the input protocol has zero trials")]
    EmptyProtocol,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
