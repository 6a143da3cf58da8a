use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("codec error: {0}")]
    Codec(String),
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape { node: usize, op: String, detail: String },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unknown {kind} `{name}`; options: {options}")]
    Lookup { kind: &'static str, name: String, options: String },
    #[error("ingestion error: {0}")]
    Ingest(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
