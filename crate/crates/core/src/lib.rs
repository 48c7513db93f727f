//! A distributed task runtime built from three pieces:
//!
//! - a thread pool with per-thread dual priority queues and work stealing ([`pool`]),
//! - parametrized task graphs, where the DAG is given as functions over a key
//!   space and discovered on demand by dependency counting ([`taskflow`]),
//! - one-sided active messages over a pluggable transport ([`comm`], [`transport`]),
//!   with global completion detected by a two-phase counting protocol ([`completion`]).
//!
//! A rank runs one [`ThreadPool`] and one [`Communicator`]. Tasks fulfill
//! dependencies locally with [`Taskflow::fulfill_promise`] or remotely by
//! sending an active message whose handler does the fulfilling.
//! [`ThreadPool::join`] returns once every rank is idle and no user message
//! is left anywhere in the system.

pub mod codec;
pub mod comm;
pub mod completion;
mod error;
pub mod pool;
pub mod sim;
pub mod taskflow;
pub mod transport;

pub use codec::{ElemType, Payload, TypeDesc, Value, View};
pub use comm::{ActiveMsg, AmId, Communicator, CounterEvent, LargeActiveMsg};
pub use error::{Error, Result};
pub use pool::{PoolConfig, Task, ThreadPool};
pub use taskflow::{RemoteFulfill, Taskflow, WeakTaskflow};
pub use transport::{MessageTag, Rank, Transport};
