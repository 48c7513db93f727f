use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("task panicked: {0}")]
    TaskPanicked(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
