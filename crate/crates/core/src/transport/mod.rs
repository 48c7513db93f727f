//! Reliable point-to-point transports beneath the communicator.
//!
//! A transport is driven from a single thread per rank (the communication
//! thread). All operations are nonblocking: sends return a handle that is
//! polled with [`Transport::test`], and receives are posted for a message that
//! [`Transport::probe`] has already reported.
//!
//! Ordering is FIFO per `(source, dest, tag)` channel. Nothing is promised
//! across tags.

mod loopback;
mod tcp;

use bytes::Bytes;

pub use loopback::{DelayModel, DeliveryRecord, LoopbackFabric, LoopbackTransport};
pub use tcp::{parse_rank_table, read_rank_table, TcpTransport, TCP_HEADER_LEN};

use crate::error::{Error, Result};

/// Rank index in `[0, n_ranks)`.
pub type Rank = usize;

/// Frames larger than this are rejected rather than split.
pub const MAX_MESSAGE_BYTES: usize = (1 << 31) - 1;

/// Distinguishes the three message streams between a pair of ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageTag {
    Regular = 0,
    LargeHeader = 1,
    LargeBody = 2,
}

impl MessageTag {
    pub fn from_u8(raw: u8) -> Result<MessageTag> {
        match raw {
            0 => Ok(MessageTag::Regular),
            1 => Ok(MessageTag::LargeHeader),
            2 => Ok(MessageTag::LargeBody),
            other => Err(Error::MalformedFrame(format!("unknown tag {other}"))),
        }
    }
}

/// Result of a successful probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub source: Rank,
    pub tag: MessageTag,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Send,
    Recv,
}

/// Opaque handle for an in-progress transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TransferHandle {
    pub id: u64,
    pub direction: Direction,
}

pub trait Transport: Send {
    fn rank(&self) -> Rank;

    fn n_ranks(&self) -> usize;

    /// Starts sending `bytes`. The buffer is shared, not copied, until the
    /// handle tests done.
    fn isend(&mut self, dest: Rank, tag: MessageTag, bytes: Bytes) -> Result<TransferHandle>;

    /// Nondestructive peek at the next deliverable message, optionally
    /// restricted to one source and/or tag.
    fn probe(&mut self, source: Option<Rank>, tag: Option<MessageTag>) -> Result<Option<Probe>>;

    /// Receives the message at the head of `(source, tag)` into `buf`, whose
    /// length must equal the probed size.
    fn irecv(&mut self, source: Rank, tag: MessageTag, buf: Vec<u8>) -> Result<TransferHandle>;

    /// Monotone: once true, stays true until the handle is retired.
    fn test(&mut self, handle: &TransferHandle) -> Result<bool>;

    /// Retires a finished receive and returns its buffer.
    fn take_recv(&mut self, handle: TransferHandle) -> Result<Vec<u8>>;

    /// Advances simulated time, where the backend has any.
    fn tick(&mut self) {}

    /// Strictly increasing global event stamp, where the backend has a
    /// global view (loopback only).
    fn event_stamp(&self) -> Option<u64> {
        None
    }
}

pub(crate) fn check_dest(dest: Rank, n_ranks: usize) -> Result<()> {
    if dest >= n_ranks {
        return Err(Error::InvalidArgument(format!(
            "rank {dest} out of range (n_ranks = {n_ranks})"
        )));
    }
    Ok(())
}

pub(crate) fn check_size(len: usize) -> Result<()> {
    if len > MAX_MESSAGE_BYTES {
        return Err(Error::InvalidArgument(format!(
            "message of {len} bytes exceeds the {MAX_MESSAGE_BYTES} byte limit"
        )));
    }
    Ok(())
}
