use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("nonpositive time {time} for record {id}")]
    NonpositiveTime { id: i64, time: f64 },
    #[error("event flag {value} outside {{0,1}} for record {id}")]
    InvalidEvent { id: i64, value: f64 },
    #[error("duplicate record id {0}")]
    DuplicateId(i64),
    #[error("all records are censored")]
    AllCensored,
    #[error("non-finite value in field {field} of record {id}")]
    NonFinite { id: i64, field: &'static str },
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("non-identifiable: column {0} is constant")]
    NonIdentifiable(String),
    #[error("rank deficient design matrix")]
    RankDeficient,
    #[error("{0}")]
    Convergence(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
