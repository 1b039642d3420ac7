use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("simulated time overflow scheduling {delay} ns after {now} ns")]
    TimeOverflow { now: u64, delay: u64 },

    #[error("engine already finished")]
    Finished,

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("machine check on {node}: line {line} got no response within {timeout_ns} ns")]
    MachineCheck {
        node: String,
        line: u64,
        timeout_ns: u64,
    },

    #[error("single-writer invariant violated on line {line}: {detail}")]
    Swmr { line: u64, detail: String },

    #[error("oversized frame: {len} bytes exceeds capacity of {max}")]
    OversizedFrame { len: usize, max: usize },

    #[error("payload of {len} bytes exceeds channel capacity of {max}")]
    PayloadTooLarge { len: usize, max: usize },

    #[error("group of {n} line pairs needs {needed} transaction slots, only {available} exist")]
    GroupTooLarge {
        n: usize,
        needed: usize,
        available: usize,
    },

    #[error("channel {0} does not support this operation")]
    WrongVariant(usize),

    #[error("descriptor ring full")]
    WouldBlock,

    #[error("descriptor ring empty")]
    Empty,

    #[error("empty sample")]
    EmptySample,

    #[error("element must be {expected} bytes, got {got}")]
    ElementLength { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("simulation stalled at {0} ns")]
    Stalled(u64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }
}
