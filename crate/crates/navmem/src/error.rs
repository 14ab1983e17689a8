//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown group id {0}")]
    UnknownGroup(u64),

    #[error("unknown object id {0}")]
    UnknownObject(u64),

    #[error("empty suffix: discrete attention needs at least one query token")]
    EmptySuffix,

    #[error("empty candidate text cannot be scored")]
    EmptyCandidate,

    #[error("model mismatch: block has {block_layers} layers / head dim {block_head_dim}, model expects {model_layers} / {model_head_dim}")]
    ModelMismatch {
        block_layers: usize,
        block_head_dim: usize,
        model_layers: usize,
        model_head_dim: usize,
    },

    #[error("duplicate group id {0} among attention blocks")]
    DuplicateBlock(u64),

    #[error(
        "device budget infeasible: requested {requested_bytes} bytes (+{overhead_bytes} resident overhead) > budget {budget_bytes}"
    )]
    BudgetInfeasible {
        requested_bytes: u64,
        overhead_bytes: u64,
        budget_bytes: u64,
    },

    #[error("unparseable planner answer: {0:?}")]
    BadAnswer(String),

    #[error("answer names no resolvable object: {0:?}")]
    UnresolvedAnswer(String),

    #[error("target cell ({0}, {1}) is unreachable")]
    Unreachable(i32, i32),

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("corrupt KV block file: {0}")]
    CorruptBlock(String),
}

pub type Result<T> = std::result::Result<T, Error>;
